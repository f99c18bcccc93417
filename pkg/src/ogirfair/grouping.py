"""Opposite gender interaction ratio (OGIR) and OGIR-based user groups."""

from __future__ import annotations

import json
import warnings
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence


class OgirEntry(NamedTuple):
    ogir: float
    n_total: int
    n_opposite: int


def compute_ogir(interactions: Iterable, genders: Mapping[int, str]) -> dict[int, OgirEntry]:
    """Fraction of each rater's rated users that have the opposite gender.

    Only users that rated somebody get an entry.
    """
    total: dict[int, int] = {}
    opposite: dict[int, int] = {}
    for it in interactions:
        try:
            g_rater, g_ratee = genders[it.rater], genders[it.ratee]
        except KeyError as exc:
            raise ValueError(f"user {exc.args[0]} has no gender label") from None
        total[it.rater] = total.get(it.rater, 0) + 1
        opposite[it.rater] = opposite.get(it.rater, 0) + (g_rater != g_ratee)
    return {u: OgirEntry(opposite[u] / n, n, opposite[u]) for u, n in sorted(total.items())}


def equal_width_boundaries(n_bins: int) -> tuple[float, ...]:
    return tuple(i / n_bins for i in range(n_bins)) + (1.0,)


def group_of(ogir: float, boundaries: Sequence[float]) -> int:
    """0-based bin index; bins are ``[b_i, b_{i+1})`` except the last, which includes 1."""
    return bisect_right(boundaries[1:-1], ogir)


@dataclass(frozen=True)
class GroupPartition:
    """Users binned by OGIR. Group ``g`` covers ``[boundaries[g], boundaries[g+1])``."""

    boundaries: tuple[float, ...]
    assignment: Mapping[int, int]

    @property
    def n_groups(self) -> int:
        return len(self.boundaries) - 1

    @property
    def sizes(self) -> tuple[int, ...]:
        sizes = [0] * self.n_groups
        for g in self.assignment.values():
            sizes[g] += 1
        return tuple(sizes)

    def members(self, group: int) -> list[int]:
        return sorted(u for u, g in self.assignment.items() if g == group)

    def to_dict(self) -> dict:
        return {
            "boundaries": list(self.boundaries),
            "sizes": list(self.sizes),
            "assignment": {str(u): g for u, g in sorted(self.assignment.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "GroupPartition":
        return cls(tuple(data["boundaries"]), {int(u): int(g) for u, g in data["assignment"].items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "GroupPartition":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _partition(ogir_table: Mapping[int, OgirEntry | float], boundaries) -> GroupPartition:
    boundaries = tuple(float(b) for b in boundaries)
    assignment = {}
    for user, entry in ogir_table.items():
        value = entry.ogir if isinstance(entry, OgirEntry) else float(entry)
        assignment[user] = group_of(value, boundaries)
    return GroupPartition(boundaries, assignment)


def partition_equal_width(ogir_table: Mapping[int, OgirEntry | float], n_groups: int = 3) -> GroupPartition:
    if n_groups < 2:
        raise ValueError("n_groups must be >= 2")
    return _partition(ogir_table, equal_width_boundaries(n_groups))


def partition_fixed_thresholds(ogir_table: Mapping[int, OgirEntry | float],
                               thresholds: Sequence[float]) -> GroupPartition:
    thresholds = [float(t) for t in thresholds]
    if any(not 0.0 < t < 1.0 for t in thresholds):
        raise ValueError(f"thresholds must lie in (0, 1): {thresholds}")
    if any(a >= b for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError(f"thresholds must be strictly increasing: {thresholds}")
    return _partition(ogir_table, [0.0, *thresholds, 1.0])


def group_weights(partition: GroupPartition, p: float) -> dict[int, float]:
    """Per-group loss weight ``1 / N_G ** p``; empty groups are left out."""
    if p < 0:
        raise ValueError("p must be non-negative")
    weights = {}
    for g, n in enumerate(partition.sizes):
        if n == 0:
            warnings.warn(f"group {g} is empty and gets no weight", RuntimeWarning, stacklevel=2)
            continue
        weights[g] = 1.0 / n ** p
    return weights
