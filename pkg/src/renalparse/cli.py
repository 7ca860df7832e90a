"""Command-line entry point: ``renalparse <stage> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from renalparse import config as config_mod
from renalparse import pipeline, segmetrics
from renalparse.mixtrain import TrainingDivergedError
from renalparse.volgrid import VolumeIOError, load_labelmap, load_volume

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
log = logging.getLogger("renalparse")


class UsageError(Exception):
    def __init__(self, message, parser):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="pipeline YAML (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--cases", type=int, help="override the number of phantom cases")
    p.add_argument("--out", type=Path, help="override the output root")
    p.add_argument("--data", type=Path, help="override the data root")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="renalparse", description="Kidney parsing pipeline on synthetic CT phantoms.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("config", help="print the effective config, or write a default one with --init")
    _common(p)
    p.add_argument("--init", type=Path, metavar="PATH", help="write a default config file to PATH")
    p.add_argument("--force", action="store_true", help="overwrite an existing file with --init")

    for name, text in [
        ("phantom", "generate the phantom dataset and manifest"),
        ("preprocess", "resample and normalize for both branches"),
        ("postprocess", "largest-component filtering of the raw predictions"),
        ("ensemble", "class-wise merge of the two branches"),
        ("report", "write report.md from the metrics"),
        ("run-all", "phantom through report in one go"),
    ]:
        _common(sub.add_parser(name, help=text))

    p = sub.add_parser("train", help="train one branch")
    _common(p)
    p.add_argument("--branch", required=True, choices=pipeline.BRANCHES)

    p = sub.add_parser("predict", help="predict the test split (both branches by default)")
    _common(p)
    p.add_argument("--branch", choices=pipeline.BRANCHES)

    p = sub.add_parser("evaluate", help="metrics for the pipeline predictions, or for --pred/--gt directories")
    _common(p)
    p.add_argument("--pred", type=Path, help="directory of predicted label maps")
    p.add_argument("--gt", type=Path, help="directory of ground-truth label maps")

    p = sub.add_parser("render", help="PNG overlay of one slice")
    _common(p)
    p.add_argument("--case", help="case id (default: first test case)")
    p.add_argument("--source", default="ensemble", choices=["gt", "A", "B", "ensemble"])
    p.add_argument("--axis", type=int, default=2, choices=[0, 1, 2])
    p.add_argument("--slice", type=int, dest="slice_index")
    p.add_argument("--image", type=Path, help="ad hoc mode: image NIfTI")
    p.add_argument("--labels", type=Path, help="ad hoc mode: label NIfTI")
    p.add_argument("--png", type=Path, help="output PNG path")
    return parser


def load_config(args) -> config_mod.PipelineConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.PipelineConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.cases is not None:
        updates["n_cases"] = args.cases
    if args.out is not None:
        updates["output_root"] = str(args.out)
    if args.data is not None:
        updates["data_root"] = str(args.data)
    if updates:
        try:
            cfg = dataclasses.replace(cfg, **updates)
        except ValueError as exc:
            raise config_mod.ConfigError(str(exc)) from exc
    return cfg.resolved()


def _cmd_config(args, parser):
    if args.init is not None:
        if args.init.exists() and not args.force:
            raise FileExistsError(f"{args.init} exists (use --force to overwrite)")
        config_mod.save(config_mod.PipelineConfig(), args.init)
        print(f"wrote {args.init}")
        return
    sys.stdout.write(config_mod.dump(load_config(args)))


def _cmd_evaluate(args, parser):
    if (args.pred is None) != (args.gt is None):
        raise UsageError("--pred and --gt must be given together", parser)
    if args.pred is None:
        aggs = pipeline.stage_evaluate(load_config(args))
        for name in pipeline.EVAL_SETS:
            print(segmetrics.format_table(aggs[name], name))
        return
    records = pipeline.evaluate_dirs(pipeline.label_files(args.pred), pipeline.label_files(args.gt))
    agg = segmetrics.aggregate(records)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        segmetrics.write_case_csv(records, args.out / "metrics.csv")
        segmetrics.write_aggregate_json(agg, args.out / "aggregate.json")
    print(segmetrics.format_table(agg, args.pred.name))


def _cmd_render(args, parser):
    from renalparse.render import render_overlay

    if (args.image is None) != (args.labels is None):
        raise UsageError("--image and --labels must be given together", parser)
    if args.image is not None:
        if args.png is None or args.slice_index is None:
            raise UsageError("ad hoc rendering needs --png and --slice", parser)
        render_overlay(load_volume(args.image), load_labelmap(args.labels), args.axis, args.slice_index, args.png)
        print(args.png)
        return
    print(pipeline.stage_render(load_config(args), args.case, args.source, args.axis, args.slice_index, args.png))


def _run(args, parser):
    cmd = args.command
    if cmd == "config":
        return _cmd_config(args, parser)
    if cmd == "evaluate":
        return _cmd_evaluate(args, parser)
    if cmd == "render":
        return _cmd_render(args, parser)
    cfg = load_config(args)
    if cmd == "phantom":
        pipeline.stage_phantom(cfg)
    elif cmd == "preprocess":
        pipeline.stage_preprocess(cfg)
    elif cmd == "train":
        pipeline.stage_train(cfg, args.branch)
    elif cmd == "predict":
        pipeline.stage_predict(cfg, (args.branch,) if args.branch else pipeline.BRANCHES)
    elif cmd == "postprocess":
        pipeline.stage_postprocess(cfg)
    elif cmd == "ensemble":
        pipeline.stage_ensemble(cfg)
    elif cmd == "report":
        print(pipeline.stage_report(cfg))
    elif cmd == "run-all":
        aggs = pipeline.run_all(cfg)
        for name in pipeline.EVAL_SETS:
            print(segmetrics.format_table(aggs[name], name))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required", parser)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", force=True)
        _run(args, parser)
    except UsageError as exc:
        exc.parser.print_usage(sys.stderr)
        print(f"{exc.parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (config_mod.ConfigError, VolumeIOError, TrainingDivergedError, ValueError, IndexError, OSError) as exc:
        print(f"renalparse: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
