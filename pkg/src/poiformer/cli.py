"""``poiformer`` command line: prepare, synth, train, eval, gradcheck, ablate, schema.

Exit codes: 0 success, 2 input error, 3 numeric failure, 4 format/version
error, 5 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from pydantic import ValidationError

from .checkpoint import CheckpointVersionError, load_checkpoint
from .config import ABLATIONS, config_schema, load_config
from .data_pipeline import (FORMATS, ParseError, SyntheticSpec, generate_synthetic, load_split,
                            parse_checkin_file, prepare, save_split, write_checkin_file)
from .evaluation import evaluate
from .gradcheck import run_all
from .tensor_core import NonFiniteError
from .trainer import NumericalError, median_metric, sweep, train

logger = logging.getLogger("poiformer")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_VERSION, EXIT_VERIFY = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _run_meta(out: Path, command: str, args: argparse.Namespace, config: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    meta = {"command": command, "flags": flags, "config": config, "poi_seed_env": os.environ.get("POI_SEED")}
    _write_json(out / "run_meta.json", meta)


def _config(args, **overrides):
    try:
        return load_config(args.config, overrides)
    except (ValidationError, ValueError, OSError) as exc:
        raise CliError(f"invalid config: {exc}") from None


def _split(data_dir):
    try:
        return load_split(data_dir)
    except (OSError, ParseError, KeyError, ValueError) as exc:
        raise CliError(f"cannot read split directory {data_dir}: {exc}") from None


# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    try:
        trajs, table = parse_checkin_file(args.input, args.format)
    except ParseError as exc:
        raise CliError(str(exc)) from None
    except OSError as exc:
        raise CliError(f"cannot read {args.input}: {exc}") from None
    if not trajs:
        logger.warning("input %s holds no check-ins; writing empty splits", args.input)
    split = prepare(trajs, table, args.min_user, args.min_poi, args.window, filter_first=not args.window_first)
    counts = save_split(split, args.out)
    _run_meta(Path(args.out), "prepare", args)
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        data = json.loads(Path(args.spec).read_text())
        if not isinstance(data, dict):
            raise TypeError("spec must be a JSON object")
        spec = SyntheticSpec(**data)
        trajs, table = generate_synthetic(spec)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise CliError(f"invalid synthetic spec: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_checkin_file(out / "checkins.tsv", trajs, table)
    _write_json(out / "spec.json", dataclasses.asdict(spec))
    _run_meta(out, "synth", args)
    print(json.dumps({"users": len(trajs), "checkins": sum(len(t) for t in trajs), "pois": len(table)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args, ablation=args.ablation, epochs=args.epochs, seed=args.seed)
    split = _split(args.data_dir)
    out = Path(args.out)
    _run_meta(out, "train", args, cfg.echo())
    try:
        result = train(cfg, split, out)
    except (NumericalError, NonFiniteError) as exc:
        diag = getattr(exc, "diagnostic", {"error": str(exc)})
        _write_json(out / "diagnostic.json", diag)
        raise CliError(f"numerical failure: {exc}; diagnostic in {out / 'diagnostic.json'}", EXIT_NUMERIC) from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    print(json.dumps({"epochs": result.epochs_run, "best_epoch": result.best_epoch, "best_val": result.best_val}))
    return EXIT_OK


def cmd_eval(args) -> int:
    split = _split(args.data_dir)
    try:
        model = load_checkpoint(args.checkpoint, split.vocab)
    except CheckpointVersionError as exc:
        raise CliError(str(exc), EXIT_VERSION) from None
    except (OSError, KeyError, ValueError, ValidationError) as exc:
        raise CliError(f"cannot load checkpoint {args.checkpoint}: {exc}", EXIT_VERSION) from None
    pairs = split.val if args.split == "val" else split.test
    metrics = evaluate(model, pairs, dump_path=args.dump_scores)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = _config(args).seed if args.config or os.environ.get("POI_SEED") else 0
    rows, ok = run_all(seed)
    width = max(len(r.op_name) for r, _ in rows)
    print(f"{'op':<{width}}  {'max_rel_err':>12}  {'params':>6}  {'limit':>7}  status")
    for report, limit in rows:
        status = "ok" if report.passed(limit) else "FAIL"
        print(f"{report.op_name:<{width}}  {report.max_rel_error:12.3e}  {report.num_params_checked:6d}  "
              f"{limit:7.0e}  {status}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_ablate(args) -> int:
    cfg = _config(args, epochs=args.epochs)
    split = _split(args.data_dir)
    out = Path(args.out)
    _run_meta(out, "ablate", args, cfg.echo())
    try:
        results = sweep(cfg, split, args.seeds, out_dir=out)
    except (NumericalError, NonFiniteError) as exc:
        raise CliError(f"numerical failure: {exc}", EXIT_NUMERIC) from None
    _write_json(out / "ablation.json", results)
    keys = ("recall@1", "recall@5", "recall@10", "ndcg@5", "ndcg@10")
    print("variant         " + "  ".join(f"{k:>9}" for k in keys) + "   (median over seeds)")
    for name, runs in results.items():
        print(f"{name:<15} " + "  ".join(f"{median_metric(runs, k):9.4f}" for k in keys))
    return EXIT_OK


def cmd_schema(args) -> int:
    print(json.dumps(config_schema(), indent=1, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poiformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="filter, window and split a check-in file")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=FORMATS, default="gowalla_tsv")
    p.add_argument("--min-user", type=int, default=10)
    p.add_argument("--min-poi", type=int, default=10)
    p.add_argument("--window", type=int, default=100)
    p.add_argument("--window-first", action="store_true", help="window before filtering")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic check-in file")
    p.add_argument("--spec", required=True, help="JSON object of SyntheticSpec fields")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a prepared split")
    p.add_argument("--config")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; prints metrics JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--dump-scores", help="write per-query top-100 (poi_id, score) JSON lines here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and a tiny model")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the three ablation variants over several seeds")
    p.add_argument("--config")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("schema", help="print the config JSON schema")
    p.set_defaults(func=cmd_schema)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
