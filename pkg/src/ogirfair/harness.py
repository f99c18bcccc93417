"""Experiment orchestration: preprocessing, seed x p x lambda sweeps, model selection, reports.

Everything a run writes lives under ``<output_dir>/<config hash>/``::

    config.json  partition.json  stats.json  selection.json  failures.json
    data/        train/validation/test/genders csv + meta.json
    models/      <cell>.npz selected checkpoints
    curves/      <cell>.csv per-epoch loss and validation scores
    records/     <cell>.json test metrics + calibration, <cell>_users.csv
    lists/       <cell>.csv re-ranked lists + .json sidecar
    reports/     comparison.csv group_bars.csv lambda_sweep.csv calibration.csv

A cell is one (variant, p, lambda, seed). Variants are ``base`` (unweighted),
``rw`` (re-weighted at p), ``rr`` (base re-ranked at lambda) and ``rw&rr``.
Reports are computed from the persisted records only.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from ogirfair.dataset import (EmptyDatasetError, dataset_stats, drop_unknown_gender, filter_low_ratings, kcore,
                              load_genders, load_interactions, read_split, stratified_split, write_split)
from ogirfair.metrics import METRICS, write_per_user_csv
from ogirfair.pipeline import PreparedData
from ogirfair.rerank import RerankConfig, write_reranked
from ogirfair.trainer import ModelParams, TrainConfig, TrainingDivergedError, write_curve

logger = logging.getLogger(__name__)

VARIANTS = ("base", "rw", "rr", "rw&rr")
SELECTION_RULES = ("avg-utility", "utility-minus-fairness")
DEFAULT_P_GRID = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5)
DEFAULT_LAM_GRID = tuple(round(0.1 * i, 1) for i in range(11))
FAIRNESS_COLS = tuple(f"d{m}" for m in METRICS)


@dataclass(frozen=True)
class ExperimentConfig:
    interactions: str | None = None
    genders: str | None = None
    rating_threshold: int = 10
    kcore: int = 5
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    split_seed: int = 0
    n_groups: int = 3
    thresholds: tuple[float, ...] | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    rerank: RerankConfig = field(default_factory=lambda: RerankConfig(k=20, k_candidates=100))
    p_grid: tuple[float, ...] = DEFAULT_P_GRID
    lam_grid: tuple[float, ...] = DEFAULT_LAM_GRID
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    selection: str = "avg-utility"
    p_tolerance: float = 0.05
    alias_p0: bool = True   # reuse the base run for the rw cell at p=0
    save_lists: bool = True
    output_dir: str = "runs"

    def __post_init__(self):
        if not self.p_grid or not self.lam_grid:
            raise ValueError("p-grid and lambda-grid must be nonempty")
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if any(p < 0 for p in self.p_grid):
            raise ValueError("p must be non-negative")
        if any(not 0 <= lam <= 1 for lam in self.lam_grid):
            raise ValueError("lambda must lie in [0, 1]")
        if self.selection not in SELECTION_RULES:
            raise ValueError(f"selection must be one of {SELECTION_RULES}")
        if not 0 <= self.p_tolerance < 1:
            raise ValueError("p_tolerance must lie in [0, 1)")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1) > 1e-9:
            raise ValueError("split ratios must be three values summing to 1")
        # per-cell fields are driven by the grids; pin them so they cannot affect the hash
        object.__setattr__(self, "train", replace(self.train, seed=0, p=0.0, selection=self.selection,
                                                  k=self.rerank.k))
        object.__setattr__(self, "rerank", replace(self.rerank, lam=0.0))

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("split_ratios", "thresholds", "p_grid", "lam_grid", "seeds"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(data)
        if isinstance(kw.get("train"), Mapping):
            kw["train"] = TrainConfig(**kw["train"])
        if isinstance(kw.get("rerank"), Mapping):
            kw["rerank"] = RerankConfig(**kw["rerank"])
        for key in ("split_ratios", "thresholds", "p_grid", "lam_grid", "seeds"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        if "p_grid" in kw:
            kw["p_grid"] = tuple(float(p) for p in kw["p_grid"])
        if "lam_grid" in kw:
            kw["lam_grid"] = tuple(float(v) for v in kw["lam_grid"])
        return cls(**kw)

    def config_hash(self) -> str:
        """Digest of every field that changes results (``output_dir`` excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.config_hash()


def load_config(path) -> ExperimentConfig:
    """Read a YAML or JSON key-value file."""
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, Mapping):
        raise ValueError(f"{path}: expected a mapping at top level")
    return ExperimentConfig.from_dict(data)


def _fmt(x: float) -> str:
    return f"{x:g}"


def cell_name(variant: str, p: float, lam: float | None, seed: int) -> str:
    lam_part = "none" if lam is None else _fmt(lam)
    return f"{variant.replace('&', '-')}_p{_fmt(p)}_lam{lam_part}_s{seed}"


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _init_run(config: ExperimentConfig) -> Path:
    root = config.run_dir()
    root.mkdir(parents=True, exist_ok=True)
    _dump(root / "config.json", {**config.to_dict(), "config_hash": config.config_hash()})
    return root


# ---------------------------------------------------------------- preprocess

def cmd_preprocess(config: ExperimentConfig) -> dict:
    """Filter, k-core and split the raw files; persist split, stats and partition."""
    for path in (config.interactions, config.genders):
        if path is None or not Path(path).is_file():
            raise FileNotFoundError(f"input file not found: {path}")
    root = _init_run(config)
    raw = load_interactions(config.interactions)
    genders = load_genders(config.genders)
    known = drop_unknown_gender(raw, genders)
    rated = filter_low_ratings(known, config.rating_threshold)
    core = kcore(rated, config.kcore)
    counts = {"raw": len(raw), "known_gender": len(known), "rating_filtered": len(rated), "kcore": len(core)}
    if not core:
        raise EmptyDatasetError(
            f"no interactions left after {config.kcore}-core pruning "
            f"(raw {counts['raw']}, known gender {counts['known_gender']}, "
            f"rating >= {config.rating_threshold}: {counts['rating_filtered']})")
    split = stratified_split(core, genders, config.split_ratios, seed=config.split_seed)
    write_split(root / "data", split, genders, meta={"config_hash": config.config_hash(), "counts": counts})
    stats = dataset_stats(core, genders).to_dict()
    _dump(root / "stats.json", stats)
    prep = PreparedData.from_split(split, genders, config.n_groups, config.thresholds)
    prep.raw_partition.save(root / "partition.json")
    logger.info("preprocessed %d -> %d interactions, %d users", counts["raw"], counts["kcore"], len(prep.index))
    return {"run_dir": str(root), "counts": counts, "n_users": len(prep.index),
            "group_sizes": list(prep.partition.sizes)}


def cmd_stats(config: ExperimentConfig, raw: bool = False) -> dict:
    """Dataset statistics, of the raw files (``raw``) or of the preprocessed split."""
    root = config.run_dir()
    if raw:
        genders = load_genders(config.genders)
        interactions = drop_unknown_gender(load_interactions(config.interactions), genders)
        out = root / "stats_raw.json"
    else:
        split, genders = _load_split(config)
        interactions = split.all()
        out = root / "stats.json"
    stats = dataset_stats(interactions, genders).to_dict()
    _dump(out, stats)
    return stats


def _load_split(config: ExperimentConfig):
    data = config.run_dir() / "data"
    if not (data / "meta.json").is_file():
        raise FileNotFoundError(f"no preprocessed data under {data}; run preprocess first")
    return read_split(data)


def prepare(config: ExperimentConfig) -> PreparedData:
    split, genders = _load_split(config)
    return PreparedData.from_split(split, genders, config.n_groups, config.thresholds)


# --------------------------------------------------------------------- train

def _record(prep: PreparedData, config: ExperimentConfig, variant: str, p: float, lam: float | None,
            seed: int, recs, extra: Mapping | None = None):
    """Test-split record of one cell, plus the reports it was built from."""
    report, calib = prep.evaluate_recs(recs, "test", config.rerank.k)
    counts: dict[str, int] = {}
    for u in report.per_user:
        g = str(prep.partition.assignment[u])
        counts[g] = counts.get(g, 0) + 1
    return {
        "variant": variant, "p": p, "lam": lam, "seed": seed, "config_hash": config.config_hash(),
        "metrics": report.to_dict(), "calibration": calib.to_dict(),
        "group_counts": dict(sorted(counts.items())), **(extra or {}),
    }, report, calib


def _persist(root: Path, prep: PreparedData, name: str, record: dict, report, calib) -> None:
    _dump(root / "records" / f"{name}.json", record)
    write_per_user_csv(root / "records" / f"{name}_users.csv", report, prep.partition, calib, prep.index.ids)


def _train_cell(config, prep, root, variant, p, seed):
    cfg = replace(config.train, seed=seed, p=p)
    result = prep.train(cfg, None if variant == "base" else p)
    sel = result.curve[result.selected_epoch - 1]
    name = cell_name(variant, p, None, seed)
    result.selected.save(root / "models" / f"{name}.npz", config_hash=config.config_hash(), seed=seed, p=p,
                         variant=variant, epoch=result.selected_epoch)
    write_curve(root / "curves" / f"{name}.csv", result.curve)
    extra = {"selected_epoch": result.selected_epoch, "val_avg_utility": sel.val_avg_utility,
             "val_avg_fairness": sel.val_avg_fairness}
    return result.selected, extra


def cmd_train(config: ExperimentConfig) -> list[dict]:
    """Train the base model and every p in the grid for each seed; select p on validation."""
    root = _init_run(config)
    prep = prepare(config)
    for sub in ("models", "curves", "records"):
        (root / sub).mkdir(exist_ok=True)
    records, failures = [], []
    for seed in config.seeds:
        cells = [("base", 0.0)] + [("rw", float(p)) for p in config.p_grid]
        base_cell = None
        for variant, p in cells:
            name = cell_name(variant, p, None, seed)
            try:
                if variant == "rw" and p == 0 and config.alias_p0 and base_cell is not None:
                    params, extra = base_cell
                    params.save(root / "models" / f"{name}.npz", config_hash=config.config_hash(), seed=seed,
                                p=p, variant=variant, alias="base")
                    extra = {**extra, "alias": "base"}
                else:
                    params, extra = _train_cell(config, prep, root, variant, p, seed)
                    if variant == "base":
                        base_cell = (params, extra)
            except TrainingDivergedError as exc:
                logger.warning("cell %s diverged: %s", name, exc)
                failures.append({"cell": name, "variant": variant, "p": p, "seed": seed, "error": str(exc)})
                continue
            rec, report, calib = _record(prep, config, variant, p, None, seed,
                                         prep.recommend(params, "test", config.rerank.k), extra)
            _persist(root, prep, name, rec, report, calib)
            records.append(rec)
            logger.info("%s: test avg utility %.4f avg fairness %.4f", name,
                        report.avg_utility, report.avg_fairness)
    _dump(root / "failures.json", failures)
    _dump(root / "selection.json", select_p(config, records))
    return records


def select_p(config: ExperimentConfig, records: Sequence[dict]) -> dict:
    """Largest grid p whose mean validation Avg Utility is within tolerance of the unweighted run.

    This turns "pick p before utility drops sharply" into a testable rule.
    Cells missing any seed are not eligible.
    """
    def mean_val(variant, p):
        vals = [r["val_avg_utility"] for r in records if r["variant"] == variant and r["p"] == p]
        if len(vals) != len(config.seeds) or any(v is None or math.isnan(v) for v in vals):
            return None
        return float(np.mean(vals))

    reference = mean_val("base", 0.0)
    table = {_fmt(p): mean_val("rw", float(p)) for p in config.p_grid}
    chosen = None
    if reference is not None:
        ok = [float(p) for p in config.p_grid
              if table[_fmt(p)] is not None and table[_fmt(p)] >= (1 - config.p_tolerance) * reference]
        chosen = max(ok) if ok else None
    if chosen is None:
        valid = {float(k): v for k, v in table.items() if v is not None}
        chosen = max(valid, key=lambda k: (valid[k], -k)) if valid else None
    return {"selected_p": chosen, "reference_val_avg_utility": reference, "val_avg_utility": table,
            "tolerance": config.p_tolerance,
            "rule": "largest p with validation avg utility >= (1 - tolerance) * unweighted (operationalized)"}


def selected_p(config: ExperimentConfig) -> float:
    path = config.run_dir() / "selection.json"
    if not path.is_file():
        raise FileNotFoundError(f"{path} missing; run train first")
    p = json.loads(path.read_text())["selected_p"]
    if p is None:
        raise RuntimeError("no re-weighted model could be selected")
    return float(p)


# -------------------------------------------------------------------- rerank

def cmd_rerank(config: ExperimentConfig, which: str = "base") -> list[dict]:
    """Re-rank the chosen ``base`` or ``rw`` checkpoints at every lambda in the grid."""
    if which not in ("base", "rw"):
        raise ValueError("which must be 'base' or 'rw'")
    root = config.run_dir()
    prep = prepare(config)
    p = 0.0 if which == "base" else selected_p(config)
    variant = "rr" if which == "base" else "rw&rr"
    records = []
    for seed in config.seeds:
        model = root / "models" / f"{cell_name(which, p, None, seed)}.npz"
        if not model.is_file():
            raise FileNotFoundError(f"missing checkpoint {model}")
        params, _ = ModelParams.load(model)
        for lam in config.lam_grid:
            rcfg = replace(config.rerank, lam=float(lam))
            recs = prep.rerank(params, rcfg, "test")
            name = cell_name(variant, p, float(lam), seed)
            rec, report, calib = _record(prep, config, variant, p, float(lam), seed, recs,
                                         {"model": model.name})
            _persist(root, prep, name, rec, report, calib)
            if config.save_lists:
                write_reranked(root / "lists" / f"{name}.csv", recs, rcfg, prep.index.ids, seed=seed,
                               p=p, variant=variant, model=model.name, config_hash=config.config_hash())
            records.append(rec)
        logger.info("re-ranked %s seed %d over %d lambdas", which, seed, len(config.lam_grid))
    return records


def cmd_evaluate(config: ExperimentConfig, model, split: str = "test", lam: float | None = None) -> dict:
    """Metrics of one checkpoint, optionally after re-ranking at ``lam``."""
    prep = prepare(config)
    params, meta = ModelParams.load(model)
    if params.n_users != prep.n_users:
        raise ValueError(f"checkpoint has {params.n_users} users, data has {prep.n_users}")
    k = config.rerank.k
    if lam is None:
        recs = prep.recommend(params, split, k)
    else:
        recs = prep.rerank(params, replace(config.rerank, lam=lam), split)
    report, calib = prep.evaluate_recs(recs, split, k)
    return {"model": str(model), "split": split, "lam": lam, "metrics": report.to_dict(),
            "calibration": calib.to_dict(), "checkpoint": meta}


# -------------------------------------------------------------------- report

def load_records(root) -> list[dict]:
    return [json.loads(p.read_text()) for p in sorted(Path(root, "records").glob("*.json"))]


def _flat(record: dict) -> dict[str, float]:
    m, c = record["metrics"], record["calibration"]
    out = {name: m["overall"][name] for name in METRICS}
    out.update({f"d{name}": m["unfairness"][name] for name in METRICS})
    out["avg_utility"] = m["avg_utility"]
    out["avg_fairness"] = m["avg_fairness"]
    out["avg_delta_group"] = c["average"]
    for g, v in c["per_group"].items():
        out[f"delta_group_{g}"] = v
    for name in METRICS:
        for g, v in m["group_means"][name].items():
            out[f"{name}_group_{g}"] = v
    return out


def aggregate(records: Sequence[dict]) -> dict[tuple, dict]:
    """Mean and std (over seeds) of every flattened value, per (variant, p, lam) cell."""
    cells: dict[tuple, list[dict]] = {}
    for r in records:
        cells.setdefault((r["variant"], float(r["p"]), r["lam"]), []).append(r)
    out = {}
    for key, recs in sorted(cells.items(), key=lambda kv: (VARIANTS.index(kv[0][0]), kv[0][1],
                                                         -1 if kv[0][2] is None else kv[0][2])):
        flats = [_flat(r) for r in recs]
        keys = sorted(set().union(*flats))
        mean = {k: float(np.mean([f[k] for f in flats if k in f])) for k in keys}
        std = {k: float(np.std([f[k] for f in flats if k in f])) for k in keys}
        out[key] = {"mean": mean, "std": std, "seeds": sorted(r["seed"] for r in recs),
                    "group_counts": recs[0]["group_counts"]}
    return out


def pct_delta(new: float, old: float, higher_is_better: bool = True) -> float:
    """Relative change in percent; positive means improvement."""
    if old == 0 or math.isnan(old) or math.isnan(new):
        return math.nan
    return 100.0 * ((new - old) if higher_is_better else (old - new)) / old


def _write_csv(path: Path, rows: list[dict], header: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


def comparison_rows(agg: Mapping[tuple, dict], selected: float | None) -> list[dict]:
    utility_cols = (*METRICS, "avg_utility")
    fairness_cols = (*FAIRNESS_COLS, "avg_fairness")
    base = agg.get(("base", 0.0, None))
    rows = []
    for (variant, p, lam), cell in agg.items():
        if lam is not None:
            continue
        m = cell["mean"]
        row = {"variant": variant, "p": p, "selected": variant == "rw" and p == selected,
               "n_seeds": len(cell["seeds"])}
        row.update({c: m[c] for c in utility_cols + fairness_cols})
        for c in utility_cols + fairness_cols:
            if variant == "base" or base is None:
                row[f"pct_{c}"] = ""
            else:
                row[f"pct_{c}"] = pct_delta(m[c], base["mean"][c], c in utility_cols)
        row["std_avg_utility"] = cell["std"]["avg_utility"]
        row["std_avg_fairness"] = cell["std"]["avg_fairness"]
        rows.append(row)
    return rows


def cmd_report(config: ExperimentConfig) -> dict[str, list[dict]]:
    """Write the table, group-bar, lambda-sweep and calibration CSVs from persisted records."""
    root = config.run_dir()
    records = load_records(root)
    if not records:
        raise FileNotFoundError(f"no records under {root / 'records'}")
    agg = aggregate(records)
    sel_path = root / "selection.json"
    selected = json.loads(sel_path.read_text())["selected_p"] if sel_path.is_file() else None
    n_groups = max(int(g) for cell in agg.values() for g in cell["group_counts"]) + 1
    groups = [str(g) for g in range(n_groups)]

    table = comparison_rows(agg, selected)
    comparison_header = ["variant", "p", "selected", "n_seeds", *METRICS, "avg_utility", *FAIRNESS_COLS, "avg_fairness",
                    *(f"pct_{c}" for c in (*METRICS, "avg_utility", *FAIRNESS_COLS, "avg_fairness")),
                    "std_avg_utility", "std_avg_fairness"]

    bars, sweep, calib = [], [], []
    for (variant, p, lam), cell in agg.items():
        m = cell["mean"]
        lam_s = "" if lam is None else lam
        for name in METRICS:
            for g in groups:
                if f"{name}_group_{g}" in m:
                    bars.append({"variant": variant, "p": p, "lam": lam_s, "metric": name, "group": g,
                                 "n_users": cell["group_counts"].get(g, 0), "mean": m[f"{name}_group_{g}"],
                                 "overall": m[name]})
        for g in groups:
            if f"delta_group_{g}" in m:
                calib.append({"variant": variant, "p": p, "lam": lam_s, "group": g,
                              "delta_group": m[f"delta_group_{g}"], "std": cell["std"][f"delta_group_{g}"]})
        if lam is not None:
            row = {"variant": variant, "p": p, "lam": lam, "n_seeds": len(cell["seeds"]),
                   "avg_utility": m["avg_utility"], "avg_fairness": m["avg_fairness"],
                   "avg_delta_group": m["avg_delta_group"]}
            row.update({f"delta_group_{g}": m.get(f"delta_group_{g}", math.nan) for g in groups})
            sweep.append(row)

    rep = root / "reports"
    _write_csv(rep / "comparison.csv", table, comparison_header)
    _write_csv(rep / "group_bars.csv", bars, ["variant", "p", "lam", "metric", "group", "n_users", "mean", "overall"])
    _write_csv(rep / "lambda_sweep.csv", sweep, ["variant", "p", "lam", "n_seeds", "avg_utility", "avg_fairness",
                                                 "avg_delta_group", *(f"delta_group_{g}" for g in groups)])
    _write_csv(rep / "calibration.csv", calib, ["variant", "p", "lam", "group", "delta_group", "std"])
    return {"comparison": table, "group_bars": bars, "lambda_sweep": sweep, "calibration": calib}


def run_all(config: ExperimentConfig) -> dict[str, list[dict]]:
    cmd_preprocess(config)
    cmd_train(config)
    cmd_rerank(config, "base")
    cmd_rerank(config, "rw")
    return cmd_report(config)
