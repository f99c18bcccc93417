"""Command line entry point: ``ogirfair <command> [--config FILE] [overrides]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from ogirfair import harness
from ogirfair.dataset import DatasetError, write_genders, write_interactions
from ogirfair.synth import SynthConfig, generate


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def build_config(args) -> harness.ExperimentConfig:
    """Config file (if any), then explicit flags, then ``--set key=value`` overrides."""
    data = harness.ExperimentConfig().to_dict()
    if args.config:
        with open(args.config) as fh:
            loaded = yaml.safe_load(fh) or {}
        for key, value in loaded.items():
            if key in ("train", "rerank") and isinstance(value, dict):
                data[key].update(value)
            else:
                data[key] = value
    flag_map = {
        "interactions": "interactions", "genders": "genders", "output_dir": "output_dir",
        "seeds": "seeds", "p_grid": "p_grid", "lam_grid": "lam_grid", "selection": "selection",
        "rating_threshold": "rating_threshold", "kcore": "kcore", "n_groups": "n_groups",
        "thresholds": "thresholds", "p_tolerance": "p_tolerance",
        "epochs": "train.epochs", "lr": "train.lr", "dim": "train.dim", "batch_size": "train.batch_size",
        "eval_every": "train.eval_every", "gender_feature": "train.gender_feature",
        "k": "rerank.k", "k_candidates": "rerank.k_candidates",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            _set_dotted(data, key, value)
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        _set_dotted(data, key.strip(), yaml.safe_load(raw))
    return harness.ExperimentConfig.from_dict(data)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON experiment config")
    p.add_argument("--interactions", help="rater,ratee,rating CSV")
    p.add_argument("--genders", help="user_id,gender CSV")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--seeds", type=_ints, help="comma-separated seeds")
    p.add_argument("--p-grid", dest="p_grid", type=_floats)
    p.add_argument("--lam-grid", dest="lam_grid", type=_floats)
    p.add_argument("--selection", choices=harness.SELECTION_RULES)
    p.add_argument("--p-tolerance", dest="p_tolerance", type=float)
    p.add_argument("--rating-threshold", dest="rating_threshold", type=int)
    p.add_argument("--kcore", type=int)
    p.add_argument("--n-groups", dest="n_groups", type=int)
    p.add_argument("--thresholds", type=_floats, help="fixed OGIR thresholds instead of equal-width bins")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--gender-feature", dest="gender_feature", action="store_const", const=True)
    p.add_argument("--k", type=int, help="list length K")
    p.add_argument("--k-candidates", dest="k_candidates", type=int, help="re-ranking pool K'")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any config field, dotted for nesting")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ogirfair", description="OGIR group fairness experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("preprocess", "filter, k-core and split the raw data"),
                            ("stats", "dataset statistics"),
                            ("train", "train base and re-weighted models over seeds"),
                            ("rerank", "re-rank a trained variant over the lambda grid"),
                            ("evaluate", "evaluate one checkpoint"),
                            ("report", "aggregate persisted records into CSV reports"),
                            ("run-all", "preprocess, train, rerank base and rw, report"),
                            ("show-config", "print the resolved config and its hash")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "stats":
            p.add_argument("--raw", action="store_true", help="describe the raw input files")
        if name == "rerank":
            p.add_argument("--which", choices=("base", "rw"), default="base")
        if name == "evaluate":
            p.add_argument("--model", required=True, help="checkpoint .npz")
            p.add_argument("--split", choices=("validation", "test"), default="test")
            p.add_argument("--lam", type=float, help="re-rank at this lambda first")

    p = sub.add_parser("synth", help="write a synthetic dating dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-users", dest="n_users", type=int, default=SynthConfig.n_users)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _summary_line(rec: dict) -> str:
    m = rec["metrics"]
    return (f"{rec['variant']:6s} p={rec['p']:<4g} lam={'-' if rec['lam'] is None else format(rec['lam'], 'g'):<4s} "
            f"seed={rec['seed']} avg_utility={m['avg_utility']:.4f} avg_fairness={m['avg_fairness']:.4f} "
            f"delta_group={rec['calibration']['average']:.4f}")


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            cfg = replace(SynthConfig(), n_users=args.n_users, seed=args.seed)
            interactions, genders = generate(cfg)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            write_interactions(out / "interactions.csv", interactions)
            write_genders(out / "genders.csv", genders)
            print(f"wrote {len(interactions)} interactions for {len(genders)} users to {out}")
            return 0

        config = build_config(args)
        if args.command == "show-config":
            print(json.dumps({**config.to_dict(), "config_hash": config.config_hash()}, indent=2))
        elif args.command == "preprocess":
            print(json.dumps(harness.cmd_preprocess(config), indent=2))
        elif args.command == "stats":
            print(json.dumps(harness.cmd_stats(config, raw=args.raw), indent=2))
        elif args.command == "train":
            for rec in harness.cmd_train(config):
                print(_summary_line(rec))
            sel = json.loads((config.run_dir() / "selection.json").read_text())
            print(f"selected p = {sel['selected_p']}")
        elif args.command == "rerank":
            for rec in harness.cmd_rerank(config, args.which):
                print(_summary_line(rec))
        elif args.command == "evaluate":
            print(json.dumps(harness.cmd_evaluate(config, args.model, args.split, args.lam), indent=2))
        elif args.command in ("report", "run-all"):
            tables = harness.run_all(config) if args.command == "run-all" else harness.cmd_report(config)
            for row in tables["comparison"]:
                print(f"{row['variant']:5s} p={row['p']:<4g} avg_utility={row['avg_utility']:.4f} "
                      f"avg_fairness={row['avg_fairness']:.4f}" + (" *" if row["selected"] else ""))
            print(f"reports written to {config.run_dir() / 'reports'}")
    except (FileNotFoundError, DatasetError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
