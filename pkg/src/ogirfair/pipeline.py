"""Index-space view of a split: encoded edges, positives, groups, evaluation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ogirfair.dataset import SplitDataset, UserIndex
from ogirfair.grouping import (GroupPartition, compute_ogir, group_weights, partition_equal_width,
                               partition_fixed_thresholds)
from ogirfair.metrics import CalibrationReport, MetricReport, RecList, calibration_report, evaluate_lists, topk_all
from ogirfair.rerank import RerankConfig, rerank_users
from ogirfair.trainer import ModelParams, TrainConfig, TrainResult, train


@dataclass
class PreparedData:
    index: UserIndex
    genders: np.ndarray
    edges: dict[str, np.ndarray]
    positives: dict[str, list[set[int]]]
    partition: GroupPartition
    raw_partition: GroupPartition
    user_group: np.ndarray

    @classmethod
    def from_split(cls, split: SplitDataset, genders: Mapping[int, str], n_groups: int = 3,
                   thresholds: Sequence[float] | None = None) -> "PreparedData":
        """Index users and group them by OGIR over the training split."""
        index = UserIndex.from_interactions(split.all())
        ogir = compute_ogir(split.train, genders)
        if thresholds is not None:
            raw = partition_fixed_thresholds(ogir, thresholds)
        else:
            raw = partition_equal_width(ogir, n_groups)
        part = GroupPartition(raw.boundaries, {index.index(u): g for u, g in raw.assignment.items()})
        user_group = np.full(len(index), -1, dtype=np.int64)
        for u, g in part.assignment.items():
            user_group[u] = g
        parts = {"train": split.train, "validation": split.validation, "test": split.test}
        return cls(
            index=index,
            genders=index.gender_array(genders),
            edges={k: index.encode(v) for k, v in parts.items()},
            positives={k: index.positives(v) for k, v in parts.items()},
            partition=part,
            raw_partition=raw,
            user_group=user_group,
        )

    @property
    def n_users(self) -> int:
        return len(self.index)

    def eval_users(self, split: str = "test") -> list[int]:
        """Users with held-out positives in ``split`` and a group."""
        pos = self.positives[split]
        return [u for u in range(self.n_users) if pos[u] and self.user_group[u] >= 0]

    def weights(self, p: float) -> dict[int, float]:
        return group_weights(self.partition, p)

    def recommend(self, params: ModelParams, split: str = "test", k: int = 20) -> dict[int, RecList]:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return topk_all(params, self.eval_users(split), k, self.positives["train"])

    def rerank(self, params: ModelParams, config: RerankConfig, split: str = "test") -> dict[int, RecList]:
        return rerank_users(params, self.eval_users(split), self.positives["train"], self.genders, config)

    def evaluate_recs(self, recs: Mapping[int, RecList], split: str = "test",
                      k: int = 20) -> tuple[MetricReport, CalibrationReport]:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            report = evaluate_lists(recs, self.positives[split], self.partition, k)
            calib = calibration_report(recs, self.positives["train"], self.genders, self.partition)
        return report, calib

    def evaluate(self, params: ModelParams, split: str = "test", k: int = 20) -> tuple[MetricReport, CalibrationReport]:
        return self.evaluate_recs(self.recommend(params, split, k), split, k)

    def train(self, config: TrainConfig, p: float | None = None, callback=None) -> TrainResult:
        """Train on the training split; ``p=None`` is the unweighted baseline."""
        weights = None if p is None else self.weights(p)

        def validate(params):
            recs = self.recommend(params, "validation", config.k)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                report = evaluate_lists(recs, self.positives["validation"], self.partition, config.k)
            return report.avg_utility, report.avg_fairness

        return train(self.edges["train"], self.n_users, config, weights=weights, user_group=self.user_group,
                     genders=self.genders, evaluate=validate, callback=callback)
