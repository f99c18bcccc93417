"""Matrix factorization trained with (re-weighted) BPR loss and plain SGD.

Every user is both a rater and a ratee. By default a user has two rows, one
in the rater table ``P`` and one in the ratee table ``Q``, and the score of
``u -> v`` is ``P[u] . Q[v]``. With ``tied=True`` both roles share one table.

Loss of one triplet ``(u, i, j)`` with group weight ``w``::

    w * (-log sigmoid(P[u].Q[i] - P[u].Q[j]) + reg * (|P[u]|^2 + |Q[i]|^2 + |Q[j]|^2))

A batch loss is the sum over its triplets.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp


logger = logging.getLogger(__name__)

MAX_REJECTIONS = 1000


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    dim: int = 64
    epochs: int = 200
    p: float = 0.0
    negatives: int = 1
    seed: int = 0
    gender_feature: bool = False
    reg: float = 1e-4
    batch_size: int = 2048
    init_std: float = 0.1
    tied: bool = False
    normalize_weights: bool = True
    eval_every: int = 1
    k: int = 20
    selection: str = "avg-utility"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.p < 0:
            raise ValueError("p must be non-negative")
        if self.dim < 1 or (self.gender_feature and self.dim < 2):
            raise ValueError("dim too small")
        if self.negatives < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("negatives, batch_size and eval_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class ModelParams:
    rater: np.ndarray
    ratee: np.ndarray
    reg: float = 1e-4

    @property
    def n_users(self) -> int:
        return self.rater.shape[0]

    @property
    def dim(self) -> int:
        return self.rater.shape[1]

    @property
    def tied(self) -> bool:
        return self.rater is self.ratee

    def copy(self) -> "ModelParams":
        rater = self.rater.copy()
        return ModelParams(rater, rater if self.tied else self.ratee.copy(), self.reg)

    def scores_for(self, users) -> np.ndarray:
        """Scores of every candidate for one user index or an array of them."""
        return self.rater[users] @ self.ratee.T

    def save(self, path, **header) -> None:
        meta = {"n_users": self.n_users, "dim": self.dim, "reg": self.reg, "tied": self.tied, **header}
        arrays = {"rater": self.rater, "meta": np.array(json.dumps(meta, sort_keys=True))}
        if not self.tied:
            arrays["ratee"] = self.ratee
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> tuple["ModelParams", dict]:
        with np.load(path) as data:
            meta = json.loads(str(data["meta"]))
            rater = data["rater"].copy()
            ratee = rater if meta["tied"] else data["ratee"].copy()
        return cls(rater, ratee, meta["reg"]), meta


def init_params(n_users: int, dim: int = 64, seed: int = 0, gender_feature: bool = False,
                genders: Sequence[str] | None = None, std: float = 0.1, reg: float = 1e-4,
                tied: bool = False) -> ModelParams:
    """Normal(0, std) embeddings; optionally the last two columns hold one-hot gender.

    ``genders`` is indexed by user index and holds ``"F"``/``"M"``.
    """
    if gender_feature and dim < 2:
        raise ValueError("gender feature needs dim >= 2")
    rng = np.random.default_rng(seed)
    tables = [rng.normal(0.0, std, size=(n_users, dim)) for _ in range(1 if tied else 2)]
    if gender_feature:
        if genders is None:
            raise ValueError("gender feature needs genders")
        female = np.asarray(genders) == "F"
        for t in tables:
            t[:, -2] = female
            t[:, -1] = ~female
    return ModelParams(tables[0], tables[-1], reg)


def score(params: ModelParams, u: int, v: int) -> float:
    return float(params.rater[u] @ params.ratee[v])


class TripletBatch(NamedTuple):
    u: np.ndarray
    i: np.ndarray
    j: np.ndarray

    def __len__(self) -> int:
        return len(self.u)

    def take(self, idx) -> "TripletBatch":
        return TripletBatch(self.u[idx], self.i[idx], self.j[idx])


def _pair_keys(users: np.ndarray, others: np.ndarray, n_users: int) -> np.ndarray:
    return users.astype(np.int64) * n_users + others


def sample_triplets(train_edges: np.ndarray, n_users: int, negatives_per_positive: int,
                    rng: np.random.Generator, known_keys: np.ndarray | None = None) -> TripletBatch:
    """One epoch of BPR triplets in random order.

    Every train edge ``(u, i)`` yields ``negatives_per_positive`` triplets with
    ``j`` drawn uniformly among users ``u`` has not rated (and ``j != u``).
    Triplets whose negative cannot be found within 1000 draws are dropped.
    """
    train_edges = np.asarray(train_edges, dtype=np.int64).reshape(-1, 2)
    if len(train_edges) == 0:
        raise ValueError("no training edges")
    if known_keys is None:
        known_keys = np.unique(_pair_keys(train_edges[:, 0], train_edges[:, 1], n_users))
    edges = np.repeat(train_edges, negatives_per_positive, axis=0)
    edges = edges[rng.permutation(len(edges))]
    u, i = edges[:, 0], edges[:, 1]
    j = rng.integers(0, n_users, size=len(u))
    bad = (j == u) | np.isin(_pair_keys(u, j, n_users), known_keys)
    for _ in range(MAX_REJECTIONS):
        if not bad.any():
            break
        idx = np.flatnonzero(bad)
        j[idx] = rng.integers(0, n_users, size=idx.size)
        bad[idx] = (j[idx] == u[idx]) | np.isin(_pair_keys(u[idx], j[idx], n_users), known_keys)
    if bad.any():
        warnings.warn(f"dropped {int(bad.sum())} triplets with no valid negative", RuntimeWarning, stacklevel=2)
        keep = ~bad
        u, i, j = u[keep], i[keep], j[keep]
    return TripletBatch(u, i, j)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def bpr_loss(params: ModelParams, batch: TripletBatch, weights: np.ndarray | None = None) -> float:
    """Weighted batch loss; ``weights`` holds one weight per triplet (default all 1)."""
    pu, qi, qj = params.rater[batch.u], params.ratee[batch.i], params.ratee[batch.j]
    x = np.einsum("nd,nd->n", pu, qi - qj)
    per = -_log_sigmoid(x) + params.reg * ((pu * pu).sum(1) + (qi * qi).sum(1) + (qj * qj).sum(1))
    if weights is not None:
        per = weights * per
    return float(per.sum())


def bpr_gradients(params: ModelParams, batch: TripletBatch, weights: np.ndarray | None = None):
    """Loss and per-triplet gradients with respect to ``P[u]``, ``Q[i]``, ``Q[j]``."""
    pu, qi, qj = params.rater[batch.u], params.ratee[batch.i], params.ratee[batch.j]
    diff = qi - qj
    x = np.einsum("nd,nd->n", pu, diff)
    per = -_log_sigmoid(x) + params.reg * ((pu * pu).sum(1) + (qi * qi).sum(1) + (qj * qj).sum(1))
    coef = -np.exp(_log_sigmoid(-x))  # d(-log sigmoid(x))/dx
    two_reg = 2.0 * params.reg
    if weights is not None:
        per = weights * per
        coef = weights * coef
        w_col = weights[:, None]
    else:
        w_col = 1.0
    c = coef[:, None]
    g_u = c * diff + two_reg * w_col * pu
    g_i = c * pu + two_reg * w_col * qi
    g_j = -c * pu + two_reg * w_col * qj
    return float(per.sum()), g_u, g_i, g_j


def dense_gradient(params: ModelParams, batch: TripletBatch, weights: np.ndarray | None = None):
    """Full gradient matrices ``(dP, dQ)``; ``dP is dQ`` for tied tables."""
    _, g_u, g_i, g_j = bpr_gradients(params, batch, weights)
    d_rater = np.zeros_like(params.rater)
    d_ratee = d_rater if params.tied else np.zeros_like(params.ratee)
    np.add.at(d_rater, batch.u, g_u)
    np.add.at(d_ratee, batch.i, g_i)
    np.add.at(d_ratee, batch.j, g_j)
    return d_rater, d_ratee


def triplet_weights(batch: TripletBatch, weights: Mapping[int, float], user_group: np.ndarray) -> np.ndarray:
    """Expand per-group weights to per-triplet weights via the rater's group."""
    groups = user_group[batch.u]
    if (groups < 0).any():
        raise ValueError("batch contains raters without a group")
    table = np.full(int(user_group.max()) + 1, np.nan)
    for g, w in weights.items():
        if g < len(table):
            table[g] = w
    w = table[groups]
    if np.isnan(w).any():
        raise ValueError("weights do not cover every group in the batch")
    return w


def bpr_step(params: ModelParams, batch: TripletBatch, weights: Mapping[int, float] | None = None,
             user_group: np.ndarray | None = None, lr: float = 0.001, reg: float | None = None,
             inplace: bool = False) -> tuple[ModelParams, float]:
    """One SGD step on the (re-weighted) batch loss.

    ``weights`` maps group to weight and ``user_group`` maps user index to
    group; without them every triplet has weight 1. The returned loss is the
    value before the update.
    """
    if not inplace:
        params = params.copy()
    if reg is not None:
        params.reg = reg
    w = None if weights is None else triplet_weights(batch, weights, user_group)
    return params, _sgd_update(params, batch, w, lr)


def _scatter_add(target: np.ndarray, idx: np.ndarray, values: np.ndarray) -> None:
    """``target[idx] += values`` with repeated indices accumulated (faster than ``np.add.at``)."""
    if idx.size == 0:
        return
    rows, inv = np.unique(idx, return_inverse=True)
    summer = sp.csr_matrix((np.ones(idx.size), (inv.ravel(), np.arange(idx.size))), shape=(rows.size, idx.size))
    target[rows] += summer @ values


def _sgd_update(params: ModelParams, batch: TripletBatch, w: np.ndarray | None, lr: float) -> float:
    loss, g_u, g_i, g_j = bpr_gradients(params, batch, w)
    if not math.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss {loss} on batch of {len(batch)}; "
            f"max |P|={np.abs(params.rater).max():.3g}, max |Q|={np.abs(params.ratee).max():.3g}, lr={lr}")
    _scatter_add(params.rater, batch.u, -lr * g_u)
    _scatter_add(params.ratee, np.concatenate([batch.i, batch.j]), np.concatenate([-lr * g_i, -lr * g_j]))
    return loss


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_avg_utility: float = math.nan
    val_avg_fairness: float = math.nan


@dataclass
class TrainResult:
    params: ModelParams
    selected: ModelParams
    selected_epoch: int
    curve: list[EpochRecord] = field(default_factory=list)
    config: TrainConfig | None = None


def selection_score(rec: EpochRecord, rule: str) -> float:
    if rule == "avg-utility":
        return rec.val_avg_utility
    if rule == "utility-minus-fairness":
        return rec.val_avg_utility - rec.val_avg_fairness
    raise ValueError(f"unknown selection rule {rule!r}")


def select_model(curve: Sequence[EpochRecord], rule: str = "avg-utility") -> EpochRecord:
    """Record with the best validation score; earliest wins ties, NaN never wins."""
    if not curve:
        raise ValueError("empty curve")
    best, best_score = curve[0], -math.inf
    for rec in curve:
        s = selection_score(rec, rule)
        if s > best_score:
            best, best_score = rec, s
    return best


def normalized_triplet_weights(train_edges: np.ndarray, weights: Mapping[int, float],
                               user_group: np.ndarray) -> dict[int, float]:
    """Rescale group weights so the mean weight over training edges is 1.

    Ratios between groups are unchanged; with plain SGD this only fixes the
    overall step size.
    """
    groups = user_group[np.asarray(train_edges)[:, 0]]
    mean = float(np.mean([weights[g] for g in groups]))
    return {g: w / mean for g, w in weights.items()}


def train(train_edges: np.ndarray, n_users: int, config: TrainConfig,
          weights: Mapping[int, float] | None = None, user_group: np.ndarray | None = None,
          genders: Sequence[str] | None = None,
          evaluate: Callable[[ModelParams], tuple[float, float]] | None = None,
          callback: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train for ``config.epochs`` epochs of shuffled mini-batch SGD.

    ``evaluate`` returns validation ``(avg_utility, avg_fairness)`` and runs
    every ``config.eval_every`` epochs and after the last one; the model at the
    best validation record (by ``config.selection``) is kept as ``selected``.
    Without ``weights`` the loss is the plain BPR loss.
    """
    train_edges = np.asarray(train_edges, dtype=np.int64).reshape(-1, 2)
    params = init_params(n_users, config.dim, config.seed, config.gender_feature, genders,
                         config.init_std, config.reg, config.tied)
    rng = np.random.default_rng([config.seed, 1])
    known = np.unique(_pair_keys(train_edges[:, 0], train_edges[:, 1], n_users))
    if weights is not None and config.normalize_weights:
        weights = normalized_triplet_weights(train_edges, weights, user_group)

    curve: list[EpochRecord] = []
    selected, selected_epoch, best = params.copy(), 0, -math.inf
    for epoch in range(1, config.epochs + 1):
        batch = sample_triplets(train_edges, n_users, config.negatives, rng, known)
        w_all = None if weights is None else triplet_weights(batch, weights, user_group)
        loss = 0.0
        for lo in range(0, len(batch), config.batch_size):
            sl = slice(lo, lo + config.batch_size)
            loss += _sgd_update(params, batch.take(sl), None if w_all is None else w_all[sl], config.lr)
        rec = EpochRecord(epoch, loss / max(len(batch), 1))
        if evaluate is not None and (epoch % config.eval_every == 0 or epoch == config.epochs):
            rec.val_avg_utility, rec.val_avg_fairness = evaluate(params)
            s = selection_score(rec, config.selection)
            if s > best:
                best, selected, selected_epoch = s, params.copy(), epoch
        curve.append(rec)
        if callback is not None:
            callback(rec)
        logger.debug("epoch %d loss %.5f", epoch, rec.loss)
    if evaluate is None:
        selected, selected_epoch = params, config.epochs
    return TrainResult(params, selected, selected_epoch, curve, config)


def write_curve(path, curve: Sequence[EpochRecord]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss,val_avg_utility,val_avg_fairness\n")
        for r in curve:
            fh.write(f"{r.epoch},{r.loss:.8g},{r.val_avg_utility:.8g},{r.val_avg_fairness:.8g}\n")


def read_curve(path) -> list[EpochRecord]:
    lines = Path(path).read_text().splitlines()[1:]
    out = []
    for line in lines:
        e, l, u, f = line.split(",")
        out.append(EpochRecord(int(e), float(l), float(u), float(f)))
    return out
