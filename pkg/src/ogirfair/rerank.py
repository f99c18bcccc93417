"""Gender-calibrated re-ranking of a user's top candidates.

A list ``R`` is scored by ``(1 - lam) * sum(score) - lam * |t_female - female_share(R)|``
with relevance scores min-max rescaled to [0, 1] per user. The list is built
greedily; ties go to the higher raw score, then the lower candidate id.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ogirfair.metrics import RecList, rank_candidates

MAX_SUBSETS = 10**6


@dataclass(frozen=True)
class RerankConfig:
    lam: float = 0.0
    k: int = 20
    k_candidates: int = 100

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.k > self.k_candidates:
            raise ValueError("k must not exceed k_candidates")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CandidateSet:
    """Candidates for one user, sorted by raw score (desc), ties by id (asc).

    ``scores`` are the values the objective uses; ``raw_scores`` are the
    model scores, used for tie-breaking.
    """

    user: int
    ids: tuple[int, ...]
    scores: tuple[float, ...]
    female: tuple[bool, ...]
    raw_scores: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.raw_scores is None:
            object.__setattr__(self, "raw_scores", tuple(self.scores))
        if not len(self.ids) == len(self.scores) == len(self.female) == len(self.raw_scores):
            raise ValueError("candidate fields differ in length")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def build(cls, user: int, ids: Sequence[int], raw_scores: Sequence[float], female: Sequence[bool]) -> "CandidateSet":
        order = sorted(range(len(ids)), key=lambda n: (-raw_scores[n], ids[n]))
        return cls(user, tuple(int(ids[n]) for n in order), tuple(float(raw_scores[n]) for n in order),
                   tuple(bool(female[n]) for n in order))


def rescale_relevance(cands: CandidateSet) -> CandidateSet:
    """Min-max rescale scores to [0, 1]; constant scores all become 1."""
    if len(cands) == 0:
        raise ValueError("no candidates")
    raw = np.asarray(cands.raw_scores, dtype=float)
    lo, hi = raw.min(), raw.max()
    scaled = np.ones_like(raw) if hi == lo else (raw - lo) / (hi - lo)
    return replace(cands, scores=tuple(float(s) for s in scaled))


def _value(lam: float, score_sum: float, n_female: int, size: int, t_female: float) -> float:
    frac = n_female / size if size else 0.0
    return (1.0 - lam) * score_sum - lam * abs(t_female - frac)


def objective(cands: CandidateSet, chosen: Sequence[int], lam: float, t_female: float) -> float:
    """Objective of the positions ``chosen`` within ``cands``."""
    return _value(lam, sum(cands.scores[n] for n in chosen), sum(cands.female[n] for n in chosen),
                  len(chosen), t_female)


def _check_k(cands: CandidateSet, k: int) -> int:
    if k > len(cands):
        warnings.warn(f"user {cands.user}: {len(cands)} candidates for k={k}", RuntimeWarning, stacklevel=3)
        return len(cands)
    return k


def _tie_key(cands: CandidateSet, n: int):
    return (cands.raw_scores[n], -cands.ids[n])


def greedy_positions_naive(cands: CandidateSet, k: int, lam: float, t_female: float) -> list[int]:
    """Greedy selection by full argmax over the remaining candidates."""
    k = _check_k(cands, k)
    chosen: list[int] = []
    remaining = set(range(len(cands)))
    s_sum, n_f = 0.0, 0
    for step in range(k):
        best, best_key = -1, None
        for n in remaining:
            key = (_value(lam, s_sum + cands.scores[n], n_f + cands.female[n], step + 1, t_female),
                   *_tie_key(cands, n))
            if best_key is None or key > best_key:
                best, best_key = n, key
        chosen.append(best)
        remaining.discard(best)
        s_sum += cands.scores[best]
        n_f += cands.female[best]
    return chosen


def greedy_positions(cands: CandidateSet, k: int, lam: float, t_female: float) -> list[int]:
    """Greedy selection comparing only the best remaining candidate of each gender.

    Within one gender the candidate with the higher score always has the
    higher objective, so with candidates sorted by raw score the argmax is
    one of the two gender heads. O(k) comparisons after the per-gender sort.
    """
    k = _check_k(cands, k)
    order = sorted(range(len(cands)), key=lambda n: (-cands.raw_scores[n], cands.ids[n]))
    heads = {g: [n for n in order if cands.female[n] == g] for g in (True, False)}
    ptr = {True: 0, False: 0}
    chosen: list[int] = []
    s_sum, n_f = 0.0, 0
    for step in range(k):
        best, best_key = -1, None
        for g in (True, False):
            if ptr[g] >= len(heads[g]):
                continue
            n = heads[g][ptr[g]]
            key = (_value(lam, s_sum + cands.scores[n], n_f + g, step + 1, t_female), *_tie_key(cands, n))
            if best_key is None or key > best_key:
                best, best_key = n, key
        ptr[cands.female[best]] += 1
        chosen.append(best)
        s_sum += cands.scores[best]
        n_f += cands.female[best]
    return chosen


def _to_reclist(cands: CandidateSet, positions: Sequence[int]) -> RecList:
    return RecList(cands.user, tuple(cands.ids[n] for n in positions), tuple(cands.raw_scores[n] for n in positions))


def greedy_rerank(cands: CandidateSet, config: RerankConfig, t_female: float, rescale: bool = True,
                  naive: bool = False) -> RecList:
    """Re-ranked list of length ``config.k`` in insertion order."""
    if rescale and len(cands):
        cands = rescale_relevance(cands)
    pick = greedy_positions_naive if naive else greedy_positions
    return _to_reclist(cands, pick(cands, config.k, config.lam, t_female))


def brute_force_rerank(cands: CandidateSet, config: RerankConfig, t_female: float,
                       rescale: bool = True) -> tuple[RecList, float]:
    """Exact optimum over all ``k``-subsets; the set comes back in raw-score order."""
    if rescale:
        cands = rescale_relevance(cands)
    k = _check_k(cands, config.k)
    if math.comb(len(cands), k) > MAX_SUBSETS:
        raise ValueError(f"C({len(cands)}, {k}) subsets exceed the limit of {MAX_SUBSETS}")
    best, best_val = None, -math.inf
    for subset in itertools.combinations(range(len(cands)), k):
        val = objective(cands, subset, config.lam, t_female)
        if val > best_val:
            best, best_val = subset, val
    return _to_reclist(cands, best), best_val


def build_candidates(params, user: int, positives: Sequence[int], genders, k_candidates: int) -> CandidateSet:
    """Top ``k_candidates`` of the base model for ``user`` (dense index)."""
    row = params.scores_for(user)
    ids = rank_candidates(row, {user, *positives}, k_candidates)
    if ids.size < k_candidates:
        warnings.warn(f"user {user}: {ids.size} candidates < {k_candidates}", RuntimeWarning, stacklevel=2)
    return CandidateSet(user, tuple(int(i) for i in ids), tuple(float(row[i]) for i in ids),
                        tuple(bool(genders[i] == "F") for i in ids))


def rerank_users(params, users: Sequence[int], positives: Sequence[set[int]], genders,
                 config: RerankConfig, chunk: int = 1024) -> dict[int, RecList]:
    """Re-rank every user in ``users`` from the base model's top candidates."""
    female = np.asarray(genders) == "F"
    out: dict[int, RecList] = {}
    users = list(users)
    for lo in range(0, len(users), chunk):
        block = users[lo:lo + chunk]
        rows = params.scores_for(np.asarray(block, dtype=np.int64))
        for u, row in zip(block, rows):
            pos = positives[u]
            ids = rank_candidates(row, {u, *pos}, config.k_candidates)
            if ids.size == 0:
                out[u] = RecList(u, ())
                continue
            cands = CandidateSet(u, tuple(int(i) for i in ids), tuple(float(row[i]) for i in ids),
                                 tuple(bool(female[i]) for i in ids))
            t_f = float(female[list(pos)].mean()) if pos else 0.0
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                out[u] = greedy_rerank(cands, config, t_f)
    return out


def write_reranked(path, recs: Mapping[int, RecList], config: RerankConfig, user_ids=None, **sidecar) -> None:
    """CSV ``user_id,rank,candidate_id,raw_score`` plus a ``.json`` sidecar with the config."""
    ids = (lambda n: int(user_ids[n])) if user_ids is not None else int
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("user_id", "rank", "candidate_id", "raw_score"))
        for user in sorted(recs):
            rec = recs[user]
            for rank, (item, s) in enumerate(zip(rec.items, rec.scores), start=1):
                w.writerow((ids(user), rank, ids(item), f"{s:.8g}"))
    with open(str(path).rsplit(".", 1)[0] + ".json", "w") as fh:
        json.dump({**config.to_dict(), **sidecar}, fh, indent=2, sort_keys=True)
