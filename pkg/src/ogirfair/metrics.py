"""Top-K lists, utility metrics, group unfairness and gender calibration."""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from ogirfair.grouping import GroupPartition

METRICS = ("R", "P", "F1", "H", "N")


@dataclass(frozen=True)
class RecList:
    user: int
    items: tuple[int, ...]
    scores: tuple[float, ...] = ()

    def __len__(self) -> int:
        return len(self.items)


class UtilityScores(NamedTuple):
    R: float
    P: float
    F1: float
    H: float
    N: float


def rank_candidates(scores: np.ndarray, exclude: Iterable[int], k: int) -> np.ndarray:
    """Indices of the ``k`` best scores, skipping ``exclude``.

    Order is descending score, ties by ascending index. Fewer than ``k``
    indices come back when the pool is too small.
    """
    scores = np.asarray(scores, dtype=float)
    pool = np.ones(scores.shape[0], dtype=bool)
    excl = np.fromiter(exclude, dtype=np.int64)
    pool[excl] = False
    cand = np.flatnonzero(pool)
    if k <= 0 or cand.size == 0:
        return cand[:0]
    vals = scores[cand]
    if cand.size > k:
        kth = np.partition(vals, cand.size - k)[cand.size - k]
        keep = vals >= kth
        cand, vals = cand[keep], vals[keep]
    order = np.lexsort((cand, -vals))
    return cand[order][:k]


def topk(params, u: int, k: int, train_positives: Iterable[int]) -> RecList:
    """Top-``k`` recommendation for user index ``u`` under ``params``.

    ``u`` itself and its training positives are never recommended. Works on
    dense indices; ``params`` is anything with ``scores_for(u)``.
    """
    scores = params.scores_for(u)
    exclude = {u, *train_positives}
    items = rank_candidates(scores, exclude, k)
    if items.size < k:
        warnings.warn(f"user {u}: only {items.size} candidates for top-{k}", RuntimeWarning, stacklevel=2)
    return RecList(u, tuple(int(i) for i in items), tuple(float(scores[i]) for i in items))


def topk_all(params, users: Sequence[int], k: int, positives: Sequence[set[int]],
             chunk: int = 1024) -> dict[int, RecList]:
    """``topk`` for many users at once, scoring in chunks."""
    out: dict[int, RecList] = {}
    short = 0
    users = list(users)
    for lo in range(0, len(users), chunk):
        block = users[lo:lo + chunk]
        score_block = params.scores_for(np.asarray(block, dtype=np.int64))
        for u, row in zip(block, score_block):
            items = rank_candidates(row, {u, *positives[u]}, k)
            short += items.size < k
            out[u] = RecList(u, tuple(int(i) for i in items), tuple(float(row[i]) for i in items))
    if short:
        warnings.warn(f"{short} users have fewer than {k} candidates", RuntimeWarning, stacklevel=2)
    return out


def _idcg(n: int) -> float:
    return sum(1.0 / math.log2(r + 1) for r in range(1, n + 1))


def utility_metrics(reclist: RecList | Sequence[int], test_positives: Iterable[int], k: int) -> UtilityScores:
    """Recall, precision, F1, hit ratio and NDCG at ``k`` with binary relevance."""
    items = reclist.items if isinstance(reclist, RecList) else tuple(reclist)
    items = items[:k]
    truth = set(test_positives)
    if not truth:
        raise ValueError("utility metrics need at least one test positive")
    hit_ranks = [r for r, i in enumerate(items, start=1) if i in truth]
    hits = len(hit_ranks)
    recall = hits / len(truth)
    precision = hits / k
    f1 = 2 * hits / (k + len(truth))  # harmonic mean of recall and precision
    dcg = sum(1.0 / math.log2(r + 1) for r in hit_ranks)
    ndcg = dcg / _idcg(min(k, len(truth)))
    return UtilityScores(recall, precision, f1, float(hits > 0), ndcg)


def group_mean(per_user: Mapping[int, float], partition: GroupPartition) -> dict[int, float]:
    """Mean value per group over the users present in ``per_user``.

    Groups with no such user are left out, with a warning.
    """
    sums = [0.0] * partition.n_groups
    counts = [0] * partition.n_groups
    for user, value in per_user.items():
        g = partition.assignment[user]
        sums[g] += value
        counts[g] += 1
    out = {}
    for g, (s, n) in enumerate(zip(sums, counts)):
        if n == 0:
            warnings.warn(f"group {g} has no evaluated users", RuntimeWarning, stacklevel=2)
            continue
        out[g] = s / n
    return out


def unfairness(q_values: Mapping[int, float] | Sequence[float]) -> float:
    """Mean absolute gap over distinct group pairs, divided by the mean group value.

    Returns NaN (with a warning) when the mean is zero.
    """
    vals = list(q_values.values()) if isinstance(q_values, Mapping) else list(q_values)
    if len(vals) < 2:
        raise ValueError("unfairness needs at least two groups")
    q_ave = sum(vals) / len(vals)
    if q_ave == 0:
        warnings.warn("all group means are zero; unfairness undefined", RuntimeWarning, stacklevel=2)
        return math.nan
    gaps = [abs(a - b) for a, b in itertools.combinations(vals, 2)]
    return (sum(gaps) / len(gaps)) / q_ave


def female_fraction(items: Sequence[int], genders) -> float:
    """Share of ``items`` labelled ``F``; 0 for an empty sequence."""
    if len(items) == 0:
        return 0.0
    return sum(genders[i] == "F" for i in items) / len(items)


def calibration_user(u: int, reclist: RecList | Sequence[int], genders, train_positives: Iterable[int]) -> float:
    """``|T^F(u) - R^F(list)|``: gap between trained-on and recommended female share."""
    items = reclist.items if isinstance(reclist, RecList) else tuple(reclist)
    train_positives = list(train_positives)
    if not items:
        raise ValueError(f"user {u}: empty recommendation list")
    if not train_positives:
        raise ValueError(f"user {u}: no training positives")
    return abs(female_fraction(train_positives, genders) - female_fraction(items, genders))


def calibration_group(partition: GroupPartition, per_user: Mapping[int, float],
                      reduce: str = "mean") -> dict[int, float]:
    """Per-group calibration, averaged (default) or summed over users."""
    if reduce == "mean":
        return group_mean(per_user, partition)
    if reduce != "sum":
        raise ValueError(f"unknown reduce {reduce!r}")
    out: dict[int, float] = {}
    for user, value in per_user.items():
        g = partition.assignment[user]
        out[g] = out.get(g, 0.0) + value
    return dict(sorted(out.items()))


@dataclass
class MetricReport:
    k: int
    per_user: dict[int, UtilityScores]
    group_means: dict[str, dict[int, float]]
    overall: dict[str, float]
    unfairness: dict[str, float]
    avg_utility: float
    avg_fairness: float

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n_users": len(self.per_user),
            "overall": self.overall,
            "group_means": {m: {str(g): v for g, v in d.items()} for m, d in self.group_means.items()},
            "unfairness": self.unfairness,
            "avg_utility": self.avg_utility,
            "avg_fairness": self.avg_fairness,
        }


@dataclass
class CalibrationReport:
    per_user: dict[int, float]
    per_group: dict[int, float]
    train_female: dict[int, float] = field(default_factory=dict)
    rec_female: dict[int, float] = field(default_factory=dict)

    @property
    def average(self) -> float:
        return float(np.mean(list(self.per_group.values()))) if self.per_group else math.nan

    def to_dict(self) -> dict:
        return {
            "per_group": {str(g): v for g, v in self.per_group.items()},
            "average": self.average,
            "n_users": len(self.per_user),
        }


def evaluate_lists(recs: Mapping[int, RecList], test_positives: Mapping[int, Iterable[int]] | Sequence,
                   partition: GroupPartition, k: int) -> MetricReport:
    """Score recommendation lists against held-out positives.

    Users without held-out positives or without a group are skipped.
    """
    per_user: dict[int, UtilityScores] = {}
    for user, rec in recs.items():
        truth = test_positives[user]
        if not truth or user not in partition.assignment:
            continue
        per_user[user] = utility_metrics(rec, truth, k)
    if not per_user:
        raise ValueError("no user could be evaluated")
    group_means = {}
    overall = {}
    fair = {}
    for m_idx, name in enumerate(METRICS):
        values = {u: s[m_idx] for u, s in per_user.items()}
        overall[name] = float(np.mean(list(values.values())))
        group_means[name] = group_mean(values, partition)
        fair[name] = unfairness(group_means[name]) if len(group_means[name]) >= 2 else math.nan
    return MetricReport(
        k=k,
        per_user=per_user,
        group_means=group_means,
        overall=overall,
        unfairness=fair,
        avg_utility=float(np.mean(list(overall.values()))),
        avg_fairness=float(np.mean(list(fair.values()))),
    )


def calibration_report(recs: Mapping[int, RecList], positives: Sequence[Iterable[int]], genders,
                       partition: GroupPartition, users: Iterable[int] | None = None,
                       reduce: str = "mean") -> CalibrationReport:
    """Calibration of ``recs`` against training positives, per user and per group."""
    per_user, t_f, r_f = {}, {}, {}
    skipped = 0
    for user in (recs if users is None else users):
        rec = recs[user]
        pos = list(positives[user])
        if not rec.items or not pos or user not in partition.assignment:
            skipped += 1
            continue
        t_f[user] = female_fraction(pos, genders)
        r_f[user] = female_fraction(rec.items, genders)
        per_user[user] = abs(t_f[user] - r_f[user])
    if skipped:
        warnings.warn(f"{skipped} users skipped in calibration", RuntimeWarning, stacklevel=2)
    return CalibrationReport(per_user, calibration_group(partition, per_user, reduce), t_f, r_f)


def write_per_user_csv(path, report: MetricReport, partition: GroupPartition,
                       calibration: CalibrationReport | None = None, user_ids=None) -> None:
    """``user_id,group,R,P,F1,H,N,delta_user`` rows; ``user_ids`` maps dense index to raw id."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("user_id", "group", *METRICS, "delta_user"))
        for user, s in sorted(report.per_user.items()):
            delta = calibration.per_user.get(user, "") if calibration else ""
            raw = int(user_ids[user]) if user_ids is not None else user
            w.writerow((raw, partition.assignment[user], *(f"{v:.6g}" for v in s),
                        f"{delta:.6g}" if delta != "" else ""))
