import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ogirfair.grouping import GroupPartition
from ogirfair.metrics import (
    RecList,
    calibration_group,
    calibration_report,
    calibration_user,
    evaluate_lists,
    group_mean,
    rank_candidates,
    topk,
    topk_all,
    unfairness,
    utility_metrics,
)


class FixedScores:
    """Minimal params stand-in: one score row per user."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)

    def scores_for(self, users):
        return self.matrix[users]


def oracle_unfairness(q):
    """Mean over ordered pairs of distinct groups, as written with an expectation over G x G."""
    pairs = [(a, b) for a in range(len(q)) for b in range(len(q)) if a != b]
    gap = sum(abs(q[a] - q[b]) for a, b in pairs) / len(pairs)
    return gap / (sum(q) / len(q))


def oracle_utility(items, truth, k):
    """Brute-force definitions; IDCG is the best DCG over every ordering of the universe."""
    hits = [i for i in items[:k] if i in truth]
    recall = Fraction(len(hits), len(truth))
    precision = Fraction(len(hits), k)
    f1 = 2 * recall * precision / (recall + precision) if hits else Fraction(0)

    def dcg(seq):
        return sum(1.0 / math.log2(r + 1) for r, i in enumerate(seq[:k], start=1) if i in truth)

    universe = sorted(set(items) | set(truth))
    idcg = max(dcg(p) for p in itertools.permutations(universe, min(k, len(universe))))
    return float(recall), float(precision), float(f1), float(bool(hits)), dcg(items) / idcg


class TestTopk:
    def test_top_two(self):
        params = FixedScores([[0, 0.9, 0.8, 0.7, 0.1]])
        assert topk(params, 0, 2, []).items == (1, 2)

    def test_ties_by_lower_id(self):
        params = FixedScores([[0, 0.5, 0.7, 0.5, 0.5]])
        assert topk(params, 0, 3, []).items == (2, 1, 3)

    def test_exhausted_pool(self):
        params = FixedScores([[0, 1, 2]])
        with pytest.warns(RuntimeWarning):
            assert topk(params, 0, 2, [1, 2]).items == ()

    def test_excludes_self_and_positives(self):
        params = FixedScores([[9, 1, 5, 3]])
        with pytest.warns(RuntimeWarning):
            assert topk(params, 0, 3, [2]).items == (3, 1)

    @given(st.lists(st.integers(0, 4), min_size=6, max_size=12), st.integers(1, 8), st.sets(st.integers(1, 11)))
    def test_matches_full_sort(self, scores, k, excl):
        row = np.array(scores, dtype=float)
        excl = {e for e in excl if e < len(row)} | {0}
        expected = sorted((i for i in range(len(row)) if i not in excl), key=lambda i: (-row[i], i))[:k]
        assert rank_candidates(row, excl, k).tolist() == expected

    def test_topk_all_matches_single(self):
        rng = np.random.default_rng(0)
        params = FixedScores(rng.normal(size=(6, 6)))
        pos = [{1}, {0, 2}, set(), {5}, {1, 2, 3}, set()]
        many = topk_all(params, range(6), 2, pos, chunk=4)
        assert all(many[u] == topk(params, u, 2, pos[u]) for u in range(6))


class TestUtility:
    def test_two_of_four(self):
        items = list(range(20))
        s = utility_metrics(items, {3, 7, 100, 101}, 20)
        assert (s.R, s.P, s.H) == (0.5, 0.1, 1.0)

    def test_ideal(self):
        assert utility_metrics([5, 6], {5}, 2).N == 1.0

    def test_second_rank(self):
        assert utility_metrics([6, 5], {5}, 2).N == pytest.approx(1 / math.log2(3), abs=1e-4)
        assert utility_metrics([6, 5], {5}, 2).N == pytest.approx(0.6309, abs=1e-4)

    def test_no_hits(self):
        assert utility_metrics([1, 2], {3}, 2) == (0.0, 0.0, 0.0, 0.0, 0.0)

    def test_empty_truth(self):
        with pytest.raises(ValueError):
            utility_metrics([1], set(), 1)

    def test_small_instances_match_oracle(self):
        universe = range(5)
        for k in (1, 2, 3):
            for items in itertools.permutations(universe, k):
                for n_t in (1, 2, 3):
                    for truth in itertools.combinations(universe, n_t):
                        got = utility_metrics(items, set(truth), k)
                        assert tuple(got) == oracle_utility(items, set(truth), k)
                        assert all(0 <= v <= 1 for v in got)
                        assert (got.H == 1) == (got.R > 0)


class TestAggregation:
    part = GroupPartition((0, 0.5, 1.0), {0: 0, 1: 0, 2: 1, 3: 1})

    def test_group_mean(self):
        assert group_mean({0: 0.2, 1: 0.4, 2: 0.5}, self.part) == pytest.approx({0: 0.3, 1: 0.5})

    def test_singleton(self):
        assert group_mean({2: 0.7}, GroupPartition((0, 1.0), {2: 0})) == {0: 0.7}

    def test_empty_group_excluded(self):
        with pytest.warns(RuntimeWarning):
            assert group_mean({0: 0.2}, self.part) == {0: 0.2}


class TestUnfairness:
    def test_equal(self):
        assert unfairness([0.2, 0.2, 0.2]) == 0.0

    def test_hand_case(self):
        assert unfairness([0.1, 0.2, 0.3]) == pytest.approx(0.6667, abs=1e-4)

    def test_zero_mean(self):
        with pytest.warns(RuntimeWarning):
            assert math.isnan(unfairness([0.0, 0.0]))

    def test_mapping_input(self):
        assert unfairness({0: 0.1, 2: 0.3}) == unfairness([0.1, 0.3])

    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6), st.floats(0.1, 10.0))
    def test_scale_invariant(self, q, c):
        assert unfairness([c * v for v in q]) == pytest.approx(unfairness(q), rel=1e-9, abs=1e-12)

    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6))
    def test_matches_oracle(self, q):
        assert unfairness(q) == pytest.approx(oracle_unfairness(q), abs=1e-12)

    @given(st.floats(0.01, 1.0), st.floats(0.01, 1.0))
    def test_two_groups(self, a, b):
        assert unfairness([a, b]) == pytest.approx(abs(a - b) / ((a + b) / 2), abs=1e-12)

    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6))
    def test_zero_iff_equal(self, q):
        assert (unfairness(q) == 0) == (len(set(q)) == 1)


class TestCalibration:
    genders = np.array(["F"] * 20 + ["M"] * 20)

    def test_exact_match(self):
        train = list(range(6)) + list(range(20, 24))  # T^F = 0.6
        rec = list(range(12)) + list(range(20, 28))   # 12/20 female
        assert calibration_user(0, rec, self.genders, train) == pytest.approx(0.0)

    def test_maximal(self):
        assert calibration_user(0, list(range(20, 40)), self.genders, [1, 2]) == 1.0

    def test_quarter(self):
        rec = list(range(15)) + list(range(20, 25))
        assert calibration_user(0, rec, self.genders, [1, 21]) == pytest.approx(0.25)

    def test_empty_list(self):
        with pytest.raises(ValueError):
            calibration_user(0, [], self.genders, [1])

    part = GroupPartition((0, 0.5, 1.0), {0: 0, 1: 0, 2: 1})

    def test_group_mean_and_sum(self):
        per_user = {0: 0.2, 1: 0.4, 2: 0.0}
        assert calibration_group(self.part, per_user) == pytest.approx({0: 0.3, 1: 0.0})
        assert calibration_group(self.part, per_user, "sum") == pytest.approx({0: 0.6, 1: 0.0})

    def test_single_user_group(self):
        with pytest.warns(RuntimeWarning):
            assert calibration_group(self.part, {2: 0.35}) == {1: 0.35}

    @given(st.integers(1, 20), st.integers(0, 20), st.integers(0, 20))
    def test_rounding_bound(self, k, n_f_train, n_m_train):
        if n_f_train + n_m_train == 0:
            return
        train = list(range(n_f_train)) + list(range(20, 20 + n_m_train))
        n_f = round(n_f_train / len(train) * k)
        rec = list(range(n_f)) + list(range(20, 20 + k - n_f))
        assert calibration_user(0, rec, self.genders, train) <= 1 / (2 * k) + 1e-12


def test_evaluate_lists_report():
    part = GroupPartition((0, 0.5, 1.0), {0: 0, 1: 1, 2: 1})
    recs = {0: RecList(0, (1, 2)), 1: RecList(1, (0, 2)), 2: RecList(2, (0, 1))}
    test_pos = [{1}, {2, 0}, set()]
    rep = evaluate_lists(recs, test_pos, part, 2)
    assert set(rep.per_user) == {0, 1}
    assert rep.overall["R"] == 1.0 and rep.overall["P"] == 0.75
    assert rep.avg_utility == pytest.approx(np.mean([rep.overall[m] for m in ("R", "P", "F1", "H", "N")]))
    assert rep.unfairness["R"] == 0.0 and rep.unfairness["P"] == pytest.approx(0.5 / 0.75)


def test_calibration_report():
    genders = np.array(["F", "M", "F", "M"])
    part = GroupPartition((0, 0.5, 1.0), {0: 0, 1: 1})
    recs = {0: RecList(0, (1, 3)), 1: RecList(1, (0, 2))}
    rep = calibration_report(recs, [{2}, {3}, set(), set()], genders, part)
    assert rep.per_user == {0: 1.0, 1: 1.0}
    assert rep.per_group == {0: 1.0, 1: 1.0} and rep.average == 1.0
