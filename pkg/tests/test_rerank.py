import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ogirfair.metrics import topk_all
from ogirfair.rerank import (
    CandidateSet,
    RerankConfig,
    brute_force_rerank,
    greedy_positions,
    greedy_positions_naive,
    greedy_rerank,
    objective,
    rerank_users,
    rescale_relevance,
    write_reranked,
)

# a(F,1.0) b(F,0.9) c(M,0.8) d(M,0.2)
ABCD = CandidateSet(0, (10, 11, 12, 13), (1.0, 0.9, 0.8, 0.2), (True, True, False, False))


@st.composite
def instances(draw, max_n=12, max_k=5):
    n = draw(st.integers(1, max_n))
    # coarse grid so ties actually show up
    raw = draw(st.lists(st.integers(0, 6), min_size=n, max_size=n))
    female = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    ids = draw(st.permutations(range(100, 100 + n)))
    cands = CandidateSet.build(0, ids, [r / 6 for r in raw], female)
    k = draw(st.integers(1, min(max_k, n)))
    lam = draw(st.sampled_from([0.0, 0.2, 0.5, 0.8, 1.0]))
    t_f = draw(st.sampled_from([0.0, 0.25, 0.5, 1 / 3, 0.9, 1.0]))
    return cands, k, lam, t_f


class TestRescale:
    def test_three_values(self):
        c = rescale_relevance(CandidateSet(0, (1, 2, 3), (2.0, 4.0, 6.0), (True, True, True)))
        assert c.scores == (0.0, 0.5, 1.0)
        assert c.raw_scores == (2.0, 4.0, 6.0)

    def test_constant(self):
        c = rescale_relevance(CandidateSet(0, (1, 2), (3.0, 3.0), (True, False)))
        assert c.scores == (1.0, 1.0)

    def test_single(self):
        assert rescale_relevance(CandidateSet(0, (1,), (-2.0,), (True,))).scores == (1.0,)


class TestObjective:
    def test_pure_relevance(self):
        c = CandidateSet(0, (1, 2), (0.7, 0.3), (True, False))
        assert objective(c, [0, 1], 0.0, 0.5) == pytest.approx(1.0)

    def test_pure_calibration(self):
        c = CandidateSet(0, (1, 2, 3), (0.9, 0.8, 0.1), (False, True, True))
        assert objective(c, [0, 1], 1.0, 0.5) == pytest.approx(0.0)

    def test_mixed(self):
        assert objective(ABCD, [0, 2], 0.5, 0.5) == pytest.approx(0.9)

    def test_empty_set_female_share_zero(self):
        assert objective(ABCD, [], 1.0, 0.4) == pytest.approx(-0.4)


class TestGreedy:
    @pytest.mark.parametrize("rescale", [False, True])
    def test_worked_example(self, rescale):
        rec = greedy_rerank(ABCD, RerankConfig(lam=0.5, k=2, k_candidates=4), 0.5, rescale=rescale)
        assert rec.items == (10, 12)

    def test_brute_force_example(self):
        rec, val = brute_force_rerank(ABCD, RerankConfig(lam=0.5, k=2, k_candidates=4), 0.5, rescale=False)
        assert set(rec.items) == {10, 12} and val == pytest.approx(0.9)

    def test_brute_force_guard(self):
        n = 40
        big = CandidateSet(0, tuple(range(n)), tuple(np.linspace(1, 0, n)), (True,) * n)
        with pytest.raises(ValueError):
            brute_force_rerank(big, RerankConfig(lam=0.5, k=20, k_candidates=n), 0.5)

    def test_lambda_zero_is_score_order(self):
        rec = greedy_rerank(ABCD, RerankConfig(lam=0.0, k=3, k_candidates=4), 1.0)
        assert rec.items == (10, 11, 12)

    def test_lambda_one_calibrates(self):
        rec = greedy_rerank(ABCD, RerankConfig(lam=1.0, k=2, k_candidates=4), 0.5)
        assert sum(ABCD.female[ABCD.ids.index(i)] for i in rec.items) == 1

    def test_full_permutation(self):
        rec = greedy_rerank(ABCD, RerankConfig(lam=0.3, k=4, k_candidates=4), 0.25)
        assert sorted(rec.items) == sorted(ABCD.ids)

    def test_short_candidate_list(self):
        with pytest.warns(RuntimeWarning):
            rec = greedy_rerank(ABCD, RerankConfig(lam=0.5, k=6, k_candidates=10), 0.5)
        assert len(rec) == 4

    def test_raw_score_breaks_rescaled_tie(self):
        # equal scores, different raw scores: higher raw wins
        c = CandidateSet(0, (5, 4), (1.0, 1.0), (True, True), raw_scores=(0.3, 0.2))
        assert greedy_positions_naive(c, 1, 0.5, 1.0) == [0]
        assert greedy_positions(c, 1, 0.5, 1.0) == [0]

    def test_id_breaks_full_tie(self):
        c = CandidateSet(0, (7, 3), (0.5, 0.5), (False, False))
        assert greedy_positions(c, 1, 0.0, 0.0) == [1]

    @given(instances())
    @settings(max_examples=300, deadline=None)
    def test_fast_equals_naive(self, inst):
        cands, k, lam, t_f = inst
        cands = rescale_relevance(cands)
        assert greedy_positions(cands, k, lam, t_f) == greedy_positions_naive(cands, k, lam, t_f)

    @given(instances())
    @settings(max_examples=200, deadline=None)
    def test_no_duplicates_and_length(self, inst):
        cands, k, lam, t_f = inst
        rec = greedy_rerank(cands, RerankConfig(lam=lam, k=k, k_candidates=max(k, len(cands))), t_f)
        assert len(rec) == k and len(set(rec.items)) == k
        assert set(rec.items) <= set(cands.ids)

    @given(instances(max_n=8, max_k=4))
    @settings(max_examples=200, deadline=None)
    def test_never_beats_optimum(self, inst):
        cands, k, lam, t_f = inst
        cfg = RerankConfig(lam=lam, k=k, k_candidates=max(k, len(cands)))
        greedy = greedy_rerank(cands, cfg, t_f)
        _, opt = brute_force_rerank(cands, cfg, t_f)
        scaled = rescale_relevance(cands)
        pos = [scaled.ids.index(i) for i in greedy.items]
        assert objective(scaled, pos, lam, t_f) <= opt + 1e-12


class FixedScores:
    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)

    def scores_for(self, users):
        return self.matrix[users]


def test_rerank_users_lambda_zero_matches_topk():
    rng = np.random.default_rng(0)
    n = 30
    params = FixedScores(rng.normal(size=(n, n)))
    genders = np.array(["F", "M"] * (n // 2))
    positives = [set(rng.choice(n, 3, replace=False).tolist()) - {u} for u in range(n)]
    base = topk_all(params, range(n), 5, positives)
    rr = rerank_users(params, range(n), positives, genders, RerankConfig(lam=0.0, k=5, k_candidates=20))
    assert all(rr[u].items == base[u].items for u in range(n))


def test_rerank_users_improves_calibration():
    rng = np.random.default_rng(1)
    n = 40
    params = FixedScores(rng.normal(size=(n, n)))
    genders = np.array(["F"] * 20 + ["M"] * 20)
    positives = [{1, 2, 3} - {u} for u in range(n)]  # all female, T^F = 1
    rr = rerank_users(params, range(n), positives, genders, RerankConfig(lam=1.0, k=5, k_candidates=20))
    assert all(all(genders[i] == "F" for i in rr[u].items) for u in range(n))


def test_write_reranked(tmp_path):
    rec = greedy_rerank(ABCD, RerankConfig(lam=0.5, k=2, k_candidates=4), 0.5)
    write_reranked(tmp_path / "r.csv", {0: rec}, RerankConfig(lam=0.5, k=2, k_candidates=4),
                   user_ids=list(range(100)), model="m.npz")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "user_id,rank,candidate_id,raw_score"
    assert rows[1] == "0,1,10,1" and rows[2] == "0,2,12,0.8"
    side = json.loads((tmp_path / "r.json").read_text())
    assert side["lam"] == 0.5 and side["model"] == "m.npz"


def test_config_validation():
    with pytest.raises(ValueError):
        RerankConfig(lam=1.5)
    with pytest.raises(ValueError):
        RerankConfig(k=30, k_candidates=20)
