"""Command-line entry point: ``tempered-laplace <command> [options]``.

Exit codes: 0 on success, 1 on a numerical failure (diverged training, a
non-finite result), 2 on I/O or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np
import yaml

from . import experiments as ex
from .data import IdxFormatError, load_idx_dataset
from .training import DivergenceError

EXIT_OK, EXIT_NUMERIC, EXIT_IO = 0, 1, 2

log = logging.getLogger("tempered_laplace")


def _override(text: str):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key, ex.parse_yaml(value)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    common.add_argument("--seed", type=int, help="base training seed (overrides train.seed)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--set", dest="overrides", action="append", type=_override, default=[],
                        metavar="KEY=VALUE", help="override a config entry, dotted keys allowed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tempered-laplace",
                                     description="Tempered Laplace posteriors for small MLPs.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-map", parents=[common], help="train MAP estimates over seeds")
    sub.add_parser("sweep", parents=[common], help="0-1 / NLL / ECE over the lambda grid")
    sub.add_parser("map-variability", parents=[common], help="spread across MAP seeds per lambda")
    sub.add_parser("bound-curve", parents=[common], help="Catoni bound next to the test error")
    sub.add_parser("prop-bound", parents=[common], help="closed-form bound vs Monte-Carlo risk")
    lc = sub.add_parser("load-check", parents=[common], help="read an IDX image/label pair")
    lc.add_argument("images")
    lc.add_argument("labels")
    lc.add_argument("--subset", type=int)
    lc.add_argument("--normalization", default="unit", choices=["unit", "standardize"])
    return parser


def _config_from_args(args) -> ex.ExperimentConfig:
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    return ex.load_config(args.config, overrides)


def _load_check(args) -> dict:
    data = load_idx_dataset(args.images, args.labels, args.subset, args.normalization)
    counts = np.bincount(data.targets, minlength=data.num_classes)
    return {"rows": data.n, "features": int(data.inputs.shape[1]),
            "label_counts": [int(c) for c in counts],
            "min": float(data.inputs.min()) if data.n else None,
            "max": float(data.inputs.max()) if data.n else None}


def run(args) -> dict:
    if args.command == "load-check":
        return _load_check(args)
    if args.jobs < 1:
        raise ex.ConfigError("--jobs must be at least 1")
    config = _config_from_args(args)
    config.out.mkdir(parents=True, exist_ok=True)
    if args.command == "train-map":
        m = ex.run_train_map(config, args.jobs)
        return {"maps": len(m["seeds"]), "rejected_seeds": m["rejected_seeds"]}
    if args.command == "sweep":
        return {"rows": len(ex.run_sweep(config, args.jobs)), "csv": str(config.out / "sweep.csv")}
    if args.command == "map-variability":
        r = ex.run_map_variability(config, jobs=args.jobs)
        return {"rows": len(r["rows"]), "map_std_zero_one": r["map_std_zero_one"]}
    if args.command == "bound-curve":
        return {"spearman": ex.run_bound_curve(config, args.jobs)["summary"]}
    if args.command == "prop-bound":
        rows = ex.run_prop_bound(config, args.jobs)["rows"]
        adm = [r for r in rows if r["admissible"]]
        return {"rows": len(rows), "admissible": len(adm),
                "violations": int(sum(r["violated"] for r in adm))}
    raise ex.ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except (DivergenceError, FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"error: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, IdxFormatError, ex.ConfigError, yaml.YAMLError, ValueError, TypeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
