"""Rating data loading, preprocessing, splitting and descriptive statistics.

Ratings are directed edges ``rater -> ratee`` with an integer score on the
platform's 1-10 scale. Users without a binary gender label are dropped,
low ratings are filtered, the graph is pruned to its k-core and the edges
are split per rater gender into train/validation/test.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from ogirfair.grouping import compute_ogir, equal_width_boundaries, group_of

logger = logging.getLogger(__name__)

RATING_MIN = 1
RATING_MAX = 10
GENDERS = ("F", "M")
INTERACTION_TYPES = ("FF", "FM", "MF", "MM")


class DatasetError(ValueError):
    """Raised for malformed or unusable rating data."""


class EmptyDatasetError(DatasetError):
    pass


class ParseError(DatasetError):
    def __init__(self, path, lineno: int, line: str, reason: str):
        self.path = str(path)
        self.lineno = lineno
        self.line = line
        super().__init__(f"{path}:{lineno}: {reason}: {line!r}")


class Interaction(NamedTuple):
    rater: int
    ratee: int
    rating: int


@dataclass(frozen=True)
class SplitDataset:
    train: tuple[Interaction, ...]
    validation: tuple[Interaction, ...]
    test: tuple[Interaction, ...]
    seed: int

    def all(self) -> list[Interaction]:
        return [*self.train, *self.validation, *self.test]


@dataclass
class DatasetStats:
    n_users: int
    n_interactions: int
    gender_counts: dict[str, int]
    interaction_counts: dict[str, int]
    mean_ratings: dict[str, float | None]
    bin_edges: list[float]
    ogir_histogram: dict[str, list[int]]
    bin_user_counts: list[int]
    bin_mean_degree: list[float | None]
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "n_users": self.n_users,
            "n_interactions": self.n_interactions,
            "gender_counts": self.gender_counts,
            "interaction_counts": self.interaction_counts,
            "mean_ratings": self.mean_ratings,
            "bin_edges": self.bin_edges,
            "ogir_histogram": self.ogir_histogram,
            "bin_user_counts": self.bin_user_counts,
            "bin_mean_degree": self.bin_mean_degree,
        }
        out.update(self.extra)
        return out


def _data_lines(path):
    with open(path, newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line


def load_interactions(path) -> list[Interaction]:
    """Read ``rater,ratee,rating`` records.

    Duplicate ``(rater, ratee)`` pairs keep their maximum rating. Self-ratings
    are skipped. Output is sorted by ``(rater, ratee)``.

    Raises:
        ParseError: a line does not hold three integers or the rating is
            outside the 1-10 scale.
        EmptyDatasetError: the file holds no records.
    """
    best: dict[tuple[int, int], int] = {}
    n_self = 0
    for lineno, line in _data_lines(path):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ParseError(path, lineno, line, "expected 3 fields")
        try:
            rater, ratee, rating = (int(p) for p in parts)
        except ValueError:
            raise ParseError(path, lineno, line, "non-integer field") from None
        if not RATING_MIN <= rating <= RATING_MAX:
            raise ParseError(path, lineno, line, "rating out of scale")
        if rater == ratee:
            n_self += 1
            continue
        key = (rater, ratee)
        if rating > best.get(key, RATING_MIN - 1):
            best[key] = rating
    if n_self:
        logger.warning("skipped %d self-ratings in %s", n_self, path)
    if not best:
        raise EmptyDatasetError(f"{path}: no interactions")
    return [Interaction(u, v, r) for (u, v), r in sorted(best.items())]


def load_genders(path) -> dict[int, str]:
    """Read ``user_id,gender`` rows; ``U`` (unknown) rows are dropped."""
    genders: dict[int, str] = {}
    for lineno, line in _data_lines(path):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise ParseError(path, lineno, line, "expected 2 fields")
        try:
            user = int(parts[0])
        except ValueError:
            if lineno == 1:  # header row
                continue
            raise ParseError(path, lineno, line, "non-integer user id") from None
        g = parts[1].upper()
        if g not in ("F", "M", "U"):
            raise ParseError(path, lineno, line, "gender must be F, M or U")
        if g != "U":
            genders[user] = g
    return genders


def write_interactions(path, interactions: Iterable[Interaction]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for it in interactions:
            w.writerow(it)


def write_genders(path, genders: Mapping[int, str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for user in sorted(genders):
            w.writerow((user, genders[user]))


def drop_unknown_gender(interactions: Iterable[Interaction],
                        genders: Mapping[int, str]) -> list[Interaction]:
    """Keep only edges whose two endpoints both have a gender label."""
    return [it for it in interactions if it.rater in genders and it.ratee in genders]


def filter_low_ratings(interactions: Iterable[Interaction], threshold: int = 10) -> list[Interaction]:
    if not RATING_MIN <= threshold <= RATING_MAX:
        raise ValueError(f"threshold {threshold} outside rating scale")
    return [it for it in interactions if it.rating >= threshold]


def kcore(interactions: Sequence[Interaction], k: int = 5) -> list[Interaction]:
    """Prune the directed rating graph to its k-core.

    A user's degree is the number of retained edges it takes part in, as
    rater or ratee. Users below ``k`` are removed together with their edges
    until no such user remains. An empty result triggers a warning.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    interactions = list(interactions)
    incident: dict[int, list[int]] = defaultdict(list)
    for e, it in enumerate(interactions):
        incident[it.rater].append(e)
        incident[it.ratee].append(e)
    degree = {u: len(es) for u, es in incident.items()}
    alive = [True] * len(interactions)
    removed: set[int] = set()
    queue = deque(u for u, d in degree.items() if d < k)
    while queue:
        u = queue.popleft()
        if u in removed:
            continue
        removed.add(u)
        for e in incident[u]:
            if not alive[e]:
                continue
            alive[e] = False
            it = interactions[e]
            other = it.ratee if it.rater == u else it.rater
            degree[other] -= 1
            if degree[other] < k and other not in removed:
                queue.append(other)
    out = [it for it, keep in zip(interactions, alive) if keep]
    if not out:
        warnings.warn(f"{k}-core is empty", RuntimeWarning, stacklevel=2)
    return out


def degrees(interactions: Iterable[Interaction]) -> Counter:
    """Total (in + out) degree per user."""
    deg: Counter = Counter()
    for it in interactions:
        deg[it.rater] += 1
        deg[it.ratee] += 1
    return deg


def _split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(ratios[0] * n))
    n_train_val = int(round((ratios[0] + ratios[1]) * n))
    n_train_val = min(max(n_train_val, n_train), n)
    return n_train, n_train_val - n_train, n - n_train_val


def stratified_split(interactions: Iterable[Interaction], genders: Mapping[int, str],
                     ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> SplitDataset:
    """Randomly split edges into train/validation/test, separately per rater gender."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    by_gender: dict[str, list[Interaction]] = {g: [] for g in GENDERS}
    for it in interactions:
        g = genders.get(it.rater)
        if g not in by_gender:
            raise DatasetError(f"rater {it.rater} has no gender label")
        by_gender[g].append(it)

    rng = np.random.default_rng(seed)
    parts: tuple[list, list, list] = ([], [], [])
    for g in GENDERS:
        edges = sorted(by_gender[g])
        order = rng.permutation(len(edges))
        n_train, n_val, _ = _split_counts(len(edges), ratios)
        cuts = (0, n_train, n_train + n_val, len(edges))
        for part, lo, hi in zip(parts, cuts, cuts[1:]):
            part.extend(edges[i] for i in order[lo:hi])
    train, val, test = (tuple(sorted(p)) for p in parts)
    return SplitDataset(train, val, test, seed)


def preprocess(interactions: Iterable[Interaction], genders: Mapping[int, str],
               threshold: int = 10, k: int = 5) -> list[Interaction]:
    """Gender filter, rating filter, then k-core pruning."""
    kept = drop_unknown_gender(interactions, genders)
    kept = filter_low_ratings(kept, threshold)
    return kcore(kept, k)


def interaction_type(it: Interaction, genders: Mapping[int, str]) -> str:
    return genders[it.rater] + genders[it.ratee]


def dataset_stats(interactions: Sequence[Interaction], genders: Mapping[int, str],
                  n_bins: int = 10) -> DatasetStats:
    """Descriptive statistics of a gender-labelled rating set.

    Means for empty interaction-type buckets and empty OGIR bins are ``None``.
    OGIR is computed from the full given history, for raters only.
    """
    if not interactions:
        raise EmptyDatasetError("cannot describe an empty dataset")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")

    deg = degrees(interactions)
    users = sorted(deg)
    gender_counts = Counter(genders[u] for u in users)

    counts = Counter()
    rating_sum = Counter()
    for it in interactions:
        t = interaction_type(it, genders)
        counts[t] += 1
        rating_sum[t] += it.rating
    mean_ratings = {t: (rating_sum[t] / counts[t] if counts[t] else None) for t in INTERACTION_TYPES}

    edges = equal_width_boundaries(n_bins)
    hist = {g: [0] * n_bins for g in GENDERS}
    bin_users = [0] * n_bins
    bin_deg = [0] * n_bins
    for user, entry in compute_ogir(interactions, genders).items():
        b = group_of(entry.ogir, edges)
        hist[genders[user]][b] += 1
        bin_users[b] += 1
        bin_deg[b] += deg[user]

    return DatasetStats(
        n_users=len(users),
        n_interactions=len(interactions),
        gender_counts={g: gender_counts.get(g, 0) for g in GENDERS},
        interaction_counts={t: counts.get(t, 0) for t in INTERACTION_TYPES},
        mean_ratings=mean_ratings,
        bin_edges=list(edges),
        ogir_histogram=hist,
        bin_user_counts=bin_users,
        bin_mean_degree=[d / n if n else None for d, n in zip(bin_deg, bin_users)],
    )


class UserIndex:
    """Dense 0..n-1 indexing of user ids, in ascending id order."""

    def __init__(self, user_ids: Iterable[int]):
        self.ids = np.array(sorted(set(user_ids)), dtype=np.int64)
        self._pos = {int(u): i for i, u in enumerate(self.ids)}

    @classmethod
    def from_interactions(cls, interactions: Iterable[Interaction]) -> "UserIndex":
        ids = set()
        for it in interactions:
            ids.add(it.rater)
            ids.add(it.ratee)
        return cls(ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, user) -> bool:
        return int(user) in self._pos

    def index(self, user: int) -> int:
        return self._pos[int(user)]

    def encode(self, interactions: Iterable[Interaction]) -> np.ndarray:
        """Map edges to an ``(E, 2)`` array of ``(rater, ratee)`` indices."""
        pairs = [(self._pos[it.rater], self._pos[it.ratee]) for it in interactions]
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)

    def positives(self, interactions: Iterable[Interaction]) -> list[set[int]]:
        """Per-rater index sets of rated users."""
        out: list[set[int]] = [set() for _ in range(len(self))]
        for it in interactions:
            out[self._pos[it.rater]].add(self._pos[it.ratee])
        return out

    def gender_array(self, genders: Mapping[int, str]) -> np.ndarray:
        return np.array([genders[int(u)] for u in self.ids])


def write_split(directory, split: SplitDataset, genders: Mapping[int, str], meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", split.train), ("validation", split.validation), ("test", split.test)):
        write_interactions(directory / f"{name}.csv", part)
    users = {u for it in split.all() for u in (it.rater, it.ratee)}
    write_genders(directory / "genders.csv", {u: genders[u] for u in users})
    (directory / "meta.json").write_text(json.dumps({"seed": split.seed, **(meta or {})}, indent=2, sort_keys=True) + "\n")


def read_split(directory) -> tuple[SplitDataset, dict[int, str]]:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    parts = []
    for name in ("train", "validation", "test"):
        path = directory / f"{name}.csv"
        parts.append(tuple(load_interactions(path)) if path.stat().st_size else ())
    return SplitDataset(*parts, seed=meta["seed"]), load_genders(directory / "genders.csv")
