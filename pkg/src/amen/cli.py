"""Command line entry point: ``amen <subcommand> ...``.

Exit status is 0 on success, 2 when an input breaks a contract (bad
config, malformed dataset, checkpoint/dataset mismatch, missing pairs)
and 1 on unexpected failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .data import DatasetFormatError
from .estimator import MissingPairsError
from .metrics import UndefinedMetricError
from .model import ContractViolation
from .simulator import SimConfig

CONTRACT_ERRORS = (ContractViolation, DatasetFormatError, MissingPairsError,
                   UndefinedMetricError, FileNotFoundError)

log = logging.getLogger("amen")


def _parse_assignment(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise harness.ConfigError(f"--set expects key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _experiment_config(args) -> harness.ExperimentConfig:
    overrides = dict(_parse_assignment(a) for a in args.set or [])
    for key in ("epochs", "learning_rate", "batch_size", "w2", "model_seed", "shuffle_seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return harness.ExperimentConfig.from_file(args.config, overrides)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with experiment keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable); VALUE is parsed as JSON")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--w2", type=float)
    p.add_argument("--model-seed", dest="model_seed", type=int)
    p.add_argument("--shuffle-seed", dest="shuffle_seed", type=int)


def cmd_generate(args) -> None:
    obj = json.loads(args.config.read_text(encoding="utf-8")) if args.config else {}
    for assignment in args.set or []:
        key, value = _parse_assignment(assignment)
        obj[key] = value
    if args.seed is not None:
        obj["rng_seed"] = args.seed
    try:
        sim = SimConfig.from_json(obj)
    except (TypeError, ValueError) as err:
        raise harness.ConfigError(str(err)) from None
    paths = harness.generate(sim, args.out_dir)
    for name, path in paths.items():
        print(f"{name}: {path}")


def cmd_pair(args) -> None:
    config = _experiment_config(args)
    _, report = harness.pair(config, args.dataset, args.out, args.report)
    print(json.dumps(report, sort_keys=True))


def cmd_train(args) -> None:
    config = _experiment_config(args)
    model = harness.train(config, args.dataset, args.checkpoint, args.log, args.eval)
    for row in model.epoch_log_:
        print(json.dumps(row, sort_keys=True))
    print(f"checkpoint: {args.checkpoint}")


def cmd_evaluate(args) -> None:
    report = harness.evaluate(args.checkpoint, args.dataset, args.report, args.dump)
    print(json.dumps(report.to_dict(), sort_keys=True))


def cmd_ablate(args) -> None:
    config = _experiment_config(args)
    grid = harness.DEFAULT_GRID
    if args.only:
        names = args.only.split(",")
        unknown = set(names) - set(grid)
        if unknown:
            raise harness.ConfigError(f"unknown grid cells {sorted(unknown)}; known: {sorted(grid)}")
        grid = {n: grid[n] for n in names}
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = harness.ablation_suite(config, args.train, args.test, grid, seeds, jobs=args.jobs)
    text = harness.format_ablation(rows)
    print(text, end="")
    if args.out:
        args.out.write_text(text, encoding="utf-8")
    if args.json:
        harness._dump_json([r.to_dict() for r in rows], args.json)


def cmd_analyze_reward(args) -> None:
    dist, summary = harness.analyze_reward(args.tsp, args.non_tsp, args.table, args.summary,
                                           seed=args.seed)
    print(json.dumps(summary, sort_keys=True))
    if any(dist.degenerate.values()):
        raise ContractViolation("a reward distribution is degenerate (zero variance)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a dataset")
    p.add_argument("--config", type=Path, help="JSON file with simulator keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pair", help="attach diff impressions to a dataset")
    p.add_argument("dataset", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--report", type=Path)
    _add_config_args(p)
    p.set_defaults(func=cmd_pair)

    p = sub.add_parser("train", help="fit a model and write a checkpoint")
    p.add_argument("dataset", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--log", type=Path)
    p.add_argument("--eval", type=Path, help="dataset scored after every epoch")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a dataset with a checkpoint")
    p.add_argument("dataset", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--report", type=Path)
    p.add_argument("--dump", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score the ablation grid")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--seeds", default="0")
    p.add_argument("--only", help="comma separated grid cells")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for the training runs")
    p.add_argument("--out", type=Path)
    p.add_argument("--json", type=Path)
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze-reward", help="reward distribution of two evaluation dumps")
    p.add_argument("--tsp", type=Path, required=True)
    p.add_argument("--non-tsp", dest="non_tsp", type=Path, required=True)
    p.add_argument("--table", type=Path)
    p.add_argument("--summary", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze_reward)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CONTRACT_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
