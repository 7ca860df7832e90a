import logging
import math

import numpy as np
import pytest
import torch

from renalparse import mixtrain as mt
from renalparse import nets
from renalparse.phantom import PhantomSpec, generate_phantom
from renalparse.prep import compute_foreground_stats, zscore


def _rand(shape, seed=0, dtype=torch.float64):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=shape)).to(dtype)


def _target(shape, seed=0, n=5):
    return torch.from_numpy(np.random.default_rng(seed).integers(0, n, shape))


def test_uniform_logits_ce_is_ln5():
    ce, dice = mt.dice_ce_components(torch.zeros(1, 5, 4, 4, 4), _target((1, 4, 4, 4)))
    assert abs(ce.item() - math.log(5)) < 1e-6
    assert 0.0 <= dice.item() <= 1.0


def test_saturated_logits_give_small_loss():
    y = _target((2, 4, 4, 4), 1)
    logits = 20.0 * torch.nn.functional.one_hot(y, 5).movedim(-1, 1).double()
    assert mt.dice_ce_loss(logits, y).item() < 0.01


def test_loss_gradient_matches_finite_differences():
    y = _target((1, 4, 4, 4), 2)
    logits = _rand((1, 5, 4, 4, 4), 3).requires_grad_(True)
    mt.dice_ce_loss(logits, y).backward()
    analytic = logits.grad.clone()
    h = 1e-6
    flat = logits.detach().clone().view(-1)
    for idx in np.random.default_rng(0).choice(flat.numel(), 60, replace=False):
        up, down = flat.clone(), flat.clone()
        up[idx] += h
        down[idx] -= h
        numeric = (
            mt.dice_ce_loss(up.view_as(logits), y) - mt.dice_ce_loss(down.view_as(logits), y)
        ).item() / (2 * h)
        a = analytic.view(-1)[idx].item()
        assert abs(a - numeric) <= 1e-3 * max(abs(a), abs(numeric), 1e-6)


def test_loss_validation():
    with pytest.raises(ValueError):
        mt.dice_ce_loss(torch.zeros(1, 5, 2, 2, 2), torch.full((1, 2, 2, 2), 5))
    with pytest.raises(ValueError):
        mt.dice_ce_loss(torch.zeros(1, 5, 2, 2, 2), torch.zeros(1, 2, 2, 3, dtype=torch.long))


def test_loss_nonnegative_and_dice_bounded():
    for seed in range(20):
        logits = 5 * _rand((2, 5, 3, 3, 3), seed)
        ce, dice = mt.dice_ce_components(logits, _target((2, 3, 3, 3), seed))
        assert ce.item() >= 0 and -1e-12 <= dice.item() <= 1.0 + 1e-5


def test_draw_mixup_distribution():
    cfg = mt.MixupConfig(alpha=0.1)
    rng = np.random.default_rng(0)
    draws = [mt.draw_mixup(cfg, rng) for _ in range(20000)]
    lams = np.array([d.lam for d in draws])
    assert lams.min() >= 0 and lams.max() <= 1
    assert {d.k for d in draws} == {0, 1, 2}
    assert all(d.pairing == (1, 0) for d in draws[:10])
    only_input = mt.MixupConfig(eligible_points=(0,))
    assert all(mt.draw_mixup(only_input, rng).k == 0 for _ in range(200))
    perm = mt.draw_mixup(cfg, rng, batch_size=5).pairing
    assert sorted(perm) == list(range(5))
    with pytest.raises(ValueError):
        mt.draw_mixup(cfg, rng, batch_size=1)
    with pytest.raises(ValueError):
        mt.draw_mixup(mt.MixupConfig(enabled=False), rng)
    with pytest.raises(ValueError):
        mt.MixupConfig(alpha=0)


def _tiny(arch="unet3d"):
    return nets.build(nets.NetConfig(arch=arch, base_channels=4, depth=2, vae_branch=False), 0).double()


def _batch(b=2, seed=0):
    return mt.Batch(_rand((b, 1, 8, 8, 8), seed), _target((b, 8, 8, 8), seed))


@pytest.mark.parametrize("arch", nets.ARCHS)
def test_mixup_endpoints(arch):
    net = _tiny(arch)
    batch = _batch()
    plain = mt.dice_ce_loss(net(batch.images).logits, batch.labels)
    swapped = mt.dice_ce_loss(net(batch.images[[1, 0]]).logits, batch.labels[[1, 0]])
    for k in net.mixing_points:
        assert abs(mt.mixup_step(net, batch, mt.MixupDraw(1.0, k, (1, 0))).item() - plain.item()) < 1e-6
        assert abs(mt.mixup_step(net, batch, mt.MixupDraw(0.0, k, (1, 0))).item() - swapped.item()) < 1e-6


def test_mixup_k0_equals_input_mixing():
    net = _tiny()
    batch = _batch()
    lam = 0.5
    mixed = lam * batch.images + (1 - lam) * batch.images[[1, 0]]
    logits = net(mixed).logits
    expected = lam * mt.dice_ce_loss(logits, batch.labels) + (1 - lam) * mt.dice_ce_loss(logits, batch.labels[[1, 0]])
    got = mt.mixup_step(net, batch, mt.MixupDraw(lam, 0, (1, 0)))
    assert abs(got.item() - expected.item()) < 1e-6


def test_mixup_continuous_in_lambda():
    net = _tiny()
    batch = _batch(seed=3)
    vals = [mt.mixup_step(net, batch, mt.MixupDraw(lam, 1, (1, 0))).item() for lam in (0.5, 0.5 + 1e-7)]
    assert abs(vals[0] - vals[1]) < 1e-4


def test_mixup_rejects_single_sample():
    with pytest.raises(ValueError):
        mt.mixup_step(_tiny(), _batch(b=1), mt.MixupDraw(0.5, 0, (0,)))


def test_small_step_does_not_increase_loss():
    ok = 0
    for seed in range(20):
        net = _tiny()
        batch = _batch(seed=seed)
        opt = torch.optim.SGD(net.parameters(), lr=1e-4)
        before = mt.plain_step(net, batch)
        before.backward()
        opt.step()
        with torch.no_grad():
            after = mt.plain_step(net, batch)
        ok += after.item() <= before.item()
    assert ok >= 19


def _cases(n=3, shape=(16, 16, 16)):
    raw = [generate_phantom(PhantomSpec(shape=shape, seed=s)) for s in range(n)]
    stats = compute_foreground_stats(raw)
    return [(zscore(v, stats).data.astype(np.float32), m.data) for v, m in raw]


def _small_cfg(**kw):
    base = dict(optimizer="adamw", lr=1e-3, epochs=2, steps_per_epoch=2, seed=5, patch_size=(16, 16, 16))
    base.update(kw)
    return mt.TrainConfig(**base)


def test_train_is_deterministic(tmp_path):
    cases = _cases()
    histories = []
    for run in range(2):
        net = nets.build(nets.NetConfig(base_channels=4, depth=2), 1)
        res = mt.train(net, cases[:2], _small_cfg(), mt.MixupConfig(), val_cases=cases[2:], out_dir=tmp_path / str(run))
        histories.append(res.history)
    assert histories[0] == histories[1]
    assert (tmp_path / "0" / "history.csv").read_text() == (tmp_path / "1" / "history.csv").read_text()
    assert (tmp_path / "0" / "best.pt").exists() and (tmp_path / "0" / "last.pt").exists()
    header = (tmp_path / "0" / "history.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_dice"


def test_parallel_batches_match_serial(monkeypatch):
    from concurrent.futures import ThreadPoolExecutor

    from renalparse.prep import AugmentConfig

    cases = _cases(2, (24, 24, 24))
    cfg = _small_cfg(batch_size=3, augment=True)
    aug = AugmentConfig()
    serial = mt.make_batch(cases, cfg, aug, epoch=1, step=4)
    with ThreadPoolExecutor(3) as pool:
        parallel = mt.make_batch(cases, cfg, aug, epoch=1, step=4, pool=pool)
    assert torch.equal(serial.images, parallel.images) and torch.equal(serial.labels, parallel.labels)


def test_first_step_equal_with_lambda_one():
    cases = _cases(2)
    cfg = _small_cfg()
    batch = mt.make_batch(cases, cfg, None, 0, 0)
    a = nets.build(nets.NetConfig(base_channels=4, depth=2), 1)
    b = nets.build(nets.NetConfig(base_channels=4, depth=2), 1)
    assert mt.plain_step(a, batch).item() == mt.mixup_step(b, batch, mt.MixupDraw(1.0, 1, (1, 0))).item()


def test_train_logs_alpha_and_guards_divergence(caplog):
    cases = _cases(2)
    net = nets.build(nets.NetConfig(base_channels=4, depth=2), 1)
    with caplog.at_level(logging.INFO, logger="renalparse.mixtrain"):
        mt.train(net, cases, _small_cfg(epochs=1, steps_per_epoch=1), mt.MixupConfig())
    assert "alpha=0.1" in caplog.text
    bad = [(np.full_like(cases[0][0], np.nan), cases[0][1])]
    with pytest.raises(mt.TrainingDivergedError):
        mt.train(net, bad, _small_cfg(epochs=1, steps_per_epoch=1))
    with pytest.raises(ValueError):
        mt.train(net, [], _small_cfg())
    with pytest.raises(ValueError):
        mt.train(net, cases, _small_cfg(), mt.MixupConfig(eligible_points=(0, 5)))


def test_segresnet_training_includes_vae_term():
    cases = _cases(2)
    cfg = _small_cfg()
    batch = mt.make_batch(cases, cfg, None, 0, 0)
    net = nets.build(nets.NetConfig(arch="segresnet", base_channels=4, depth=2), 0)
    torch.manual_seed(0)
    with_vae = mt.plain_step(net, batch).item()
    net.use_vae = False
    assert with_vae > mt.plain_step(net, batch).item()


def test_full_scale_presets():
    a, b = mt.FULL_SCALE_PRESETS["unet3d"], mt.FULL_SCALE_PRESETS["segresnet"]
    assert (a.optimizer, a.lr, a.epochs, a.batch_size) == ("sgd", 0.01, 1000, 2)
    assert (b.optimizer, b.lr, b.epochs, b.batch_size) == ("adamw", 1e-4, 4000, 2)
    assert mt.MixupConfig().alpha == 0.1
