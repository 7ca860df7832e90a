import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_hd_ahd, count_dsc
from renalparse import segmetrics as sm
from renalparse.volgrid import LabelMap


def test_dsc_examples():
    a = np.zeros((3, 3, 3), bool)
    a[0, 0, :3] = True
    assert sm.dsc(a, a) == 1.0
    b = np.zeros_like(a)
    b[2, 2, 2] = True
    assert sm.dsc(a, b) == 0.0
    p = np.zeros((3, 3, 3), bool)
    g = np.zeros((3, 3, 3), bool)
    p[0, 0, :3] = True
    p[1, 1, 1] = True  # |P| = 4
    g[0, 0, :3] = True
    g[2, 2, :3] = True  # |G| = 6, |P & G| = 3
    assert sm.dsc(p, g) == pytest.approx(0.6, abs=0)
    assert count_dsc(p, g) == 0.6
    with pytest.raises(ValueError):
        sm.dsc(p, np.zeros((3, 3, 2)))


def test_surface_counts():
    one = np.zeros((5, 5, 5), bool)
    one[2, 2, 2] = True
    assert len(sm.extract_surface(one)) == 1
    cube = np.zeros((5, 5, 5), bool)
    cube[1:4, 1:4, 1:4] = True
    assert len(sm.extract_surface(cube)) == 26
    full = np.ones((5, 5, 5), bool)  # touches the border: outside counts as background
    assert len(sm.extract_surface(full)) == 5**3 - 3**3
    pts = sm.extract_surface(one, (0.5, 2.0, 1.0))
    np.testing.assert_allclose(pts, [[1.0, 4.0, 2.0]])


def test_hausdorff_single_voxels(backend):
    p = np.zeros((4, 1, 1), bool)
    g = np.zeros((4, 1, 1), bool)
    p[0, 0, 0] = g[3, 0, 0] = True
    assert sm.hausdorff(p, g) == pytest.approx(3.0)
    assert sm.avg_hausdorff(p, g) == pytest.approx(3.0)
    assert sm.hausdorff(p, g, (0.5, 1, 1)) == pytest.approx(1.5)
    assert sm.hausdorff(p, p) == 0.0 and sm.avg_hausdorff(p, p) == 0.0


def test_degenerate_conventions():
    empty = np.zeros((4, 4, 4), bool)
    some = empty.copy()
    some[1, 1, 1] = True
    assert sm.dsc(empty, empty) == 1.0
    assert sm.hausdorff(empty, empty) == 0.0 and sm.avg_hausdorff(empty, empty) == 0.0
    assert sm.dsc(empty, some) == 0.0 and sm.dsc(some, empty) == 0.0
    assert sm.hausdorff(empty, some) is None and sm.avg_hausdorff(some, empty) is None


def test_random_against_brute_force(backend):
    rng = np.random.default_rng(11)
    for trial in range(25):
        spacing = (1.0, 1.0, 1.0) if trial % 2 else (0.5, 0.7, 0.75)
        p = rng.random((8, 8, 8)) < rng.uniform(0.05, 0.6)
        g = rng.random((8, 8, 8)) < rng.uniform(0.05, 0.6)
        hd, ahd = brute_hd_ahd(p, g, spacing)
        assert sm.dsc(p, g) == count_dsc(p, g)
        assert abs(sm.hausdorff(p, g, spacing) - hd) <= 1e-9
        assert abs(sm.avg_hausdorff(p, g, spacing) - ahd) <= 1e-9


masks = arrays(bool, (5, 5, 5), elements=st.booleans())


@settings(max_examples=60, deadline=None)
@given(masks, masks, st.sampled_from([(1.0, 1.0, 1.0), (0.5, 0.7, 0.75)]))
def test_metric_properties(p, g, spacing):
    assert sm.dsc(p, g) == sm.dsc(g, p)
    hd, ahd = sm.hausdorff(p, g, spacing), sm.avg_hausdorff(p, g, spacing)
    assert hd == sm.hausdorff(g, p, spacing)
    if hd is not None:
        assert math.isclose(ahd, sm.avg_hausdorff(g, p, spacing), abs_tol=1e-12)
        assert 0.0 <= ahd <= hd + 1e-12
    for axis in range(3):
        fp, fg = np.flip(p, axis), np.flip(g, axis)
        assert sm.dsc(fp, fg) == sm.dsc(p, g)
        fhd = sm.hausdorff(fp, fg, spacing)
        assert (fhd is None) == (hd is None)
        if hd is not None:
            assert math.isclose(fhd, hd, abs_tol=1e-9)
            assert math.isclose(sm.avg_hausdorff(fp, fg, spacing), ahd, abs_tol=1e-9)
    if p.any():
        assert sm.dsc(p, p) == 1.0 and sm.hausdorff(p, p, spacing) == 0.0


def _labels(shape=(4, 4, 4)):
    return np.zeros(shape, np.uint8)


def test_evaluate_case_identity_and_missing_tumor():
    gt = _labels()
    gt[0, :2, :2] = 1
    gt[3, 3, 3] = 3
    gt[2, 0, 0] = 4
    rec = sm.evaluate_case(LabelMap(gt), LabelMap(gt.copy()), "c")
    for name, m in rec.per_class.items():
        assert (m.dsc, m.hd, m.ahd) == (1.0, 0.0, 0.0), name


def test_evaluate_case_hand_built():
    gt, pred = _labels(), _labels()
    gt[0, 0, 0:2] = 1  # kidney: two voxels along z
    pred[0, 0, 0] = 1
    gt[3, 3, 3] = 2  # tumor: one voxel, predicted one voxel away in x
    pred[2, 3, 3] = 2
    pred[0, 3, 0] = 3  # vein predicted but absent in gt
    spacing = (0.5, 1.0, 2.0)
    rec = sm.evaluate_case(LabelMap(pred, spacing), LabelMap(gt, spacing))
    k = rec.per_class["kidney"]
    assert k.dsc == pytest.approx(2 * 1 / 3)
    assert k.hd == pytest.approx(2.0)
    assert k.ahd == pytest.approx(0.5 * (0.0 + (0.0 + 2.0) / 2))
    t = rec.per_class["tumor"]
    assert (t.dsc, t.hd, t.ahd) == (0.0, pytest.approx(0.5), pytest.approx(0.5))
    v = rec.per_class["vein"]
    assert (v.dsc, v.hd, v.ahd) == (0.0, None, None)
    a = rec.per_class["artery"]
    assert (a.dsc, a.hd, a.ahd) == (1.0, 0.0, 0.0)


def test_aggregate_and_csv(tmp_path):
    def rec(cid, d):
        return sm.MetricsRecord(
            cid, {n: sm.ClassMetrics(d, None if n == "vein" and cid == "b" else 1.0, 0.5) for n in sm.CLASS_ORDER}
        )

    agg = sm.aggregate([rec("b", 0.8), rec("a", 1.0)])
    assert agg["classes"]["kidney"]["dsc"] == pytest.approx(0.9)
    assert agg["classes"]["vein"]["hd"] == 1.0 and agg["classes"]["vein"]["hd_excluded"] == 1
    assert list(agg["classes"]) == ["kidney", "tumor", "vein", "artery"]
    one = sm.aggregate([rec("a", 0.7)])
    assert one["classes"]["tumor"] == {
        "dsc": 0.7, "dsc_excluded": 0, "hd": 1.0, "hd_excluded": 0, "ahd": 0.5, "ahd_excluded": 0,
    }
    with pytest.raises(ValueError):
        sm.aggregate([])
    table = sm.format_table(agg, "ensemble")
    header = table.splitlines()[0]
    assert header.index("Kidney DSC") < header.index("Kidney HD") < header.index("Tumor DSC")
    assert header.index("Vein AHD") < header.index("Artery DSC")
    path = tmp_path / "m.csv"
    sm.write_case_csv([rec("b", 0.8), rec("a", 1.0)], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "case_id,class,dsc,hd_mm,ahd_mm"
    assert lines[1].startswith("a,kidney,")
    assert "b,vein,0.8,,0.5" in lines
    back = sm.read_case_csv(path)
    assert sm.aggregate(back) == agg
