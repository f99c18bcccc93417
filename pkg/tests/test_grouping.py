import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ogirfair.dataset import Interaction
from ogirfair.grouping import (
    GroupPartition,
    OgirEntry,
    compute_ogir,
    group_weights,
    partition_equal_width,
    partition_fixed_thresholds,
)

ratios = st.floats(0.0, 1.0, allow_nan=False)


def table(*values):
    return {u: OgirEntry(v, 1, 0) for u, v in enumerate(values)}


class TestOgir:
    genders = {0: "M", 1: "F", 2: "F", 3: "F", 4: "F", 5: "M", 6: "F"}

    def test_male_mostly_females(self):
        edges = [Interaction(0, v, 10) for v in (1, 2, 3, 4, 5)]
        assert compute_ogir(edges, self.genders)[0] == OgirEntry(0.8, 5, 4)

    def test_boundaries(self):
        edges = [Interaction(1, 0, 10), Interaction(1, 5, 10), Interaction(2, 3, 10)]
        ogir = compute_ogir(edges, self.genders)
        assert ogir[1].ogir == 1.0 and ogir[2].ogir == 0.0

    def test_only_raters_get_entries(self):
        ogir = compute_ogir([Interaction(0, 1, 10)], self.genders)
        assert set(ogir) == {0}

    def test_missing_gender(self):
        with pytest.raises(ValueError):
            compute_ogir([Interaction(0, 99, 10)], self.genders)


class TestPartition:
    def test_equal_width_three(self):
        part = partition_equal_width(table(0.0, 0.34, 1.0, 1 / 3))
        # group indices are 0-based: G1 -> 0
        assert part.assignment == {0: 0, 1: 1, 2: 2, 3: 1}

    def test_two_groups_half(self):
        assert partition_equal_width(table(0.5), 2).assignment == {0: 1}

    def test_two_thirds_goes_to_last(self):
        assert partition_equal_width(table(2 / 3, 4 / 6, 0.6666), 3).assignment == {0: 2, 1: 2, 2: 1}

    def test_n_groups_validation(self):
        with pytest.raises(ValueError):
            partition_equal_width(table(0.5), 1)

    def test_fixed_threshold(self):
        assert partition_fixed_thresholds(table(0.95, 0.5), [0.9]).assignment == {0: 1, 1: 0}

    @given(st.lists(ratios, max_size=50))
    def test_fixed_matches_equal_width(self, values):
        t = table(*values)
        a = partition_fixed_thresholds(t, [1 / 3, 2 / 3])
        b = partition_equal_width(t, 3)
        assert a.assignment == b.assignment and a.boundaries == b.boundaries

    def test_empty_thresholds(self):
        part = partition_fixed_thresholds(table(0.0, 0.5, 1.0), [])
        assert part.n_groups == 1 and part.sizes == (3,)

    @pytest.mark.parametrize("bad", [[0.5, 0.5], [0.7, 0.3], [0.0], [1.0]])
    def test_bad_thresholds(self, bad):
        with pytest.raises(ValueError):
            partition_fixed_thresholds(table(0.5), bad)

    @given(st.lists(ratios, max_size=50), st.integers(2, 7))
    def test_invariants(self, values, n):
        part = partition_equal_width(table(*values), n)
        assert part.boundaries[0] == 0.0 and part.boundaries[-1] == 1.0
        assert all(a < b for a, b in zip(part.boundaries, part.boundaries[1:]))
        assert sum(part.sizes) == len(values)
        for u, v in enumerate(values):
            g = part.assignment[u]
            lo, hi = part.boundaries[g], part.boundaries[g + 1]
            assert lo <= v < hi or (v == 1.0 and g == n - 1)

    def test_json_round_trip(self, tmp_path):
        part = partition_equal_width(table(0.1, 0.5, 0.9))
        part.save(tmp_path / "p.json")
        data = json.loads((tmp_path / "p.json").read_text())
        assert data["sizes"] == [1, 1, 1]
        assert GroupPartition.load(tmp_path / "p.json") == part


def sized(*sizes):
    assignment, u = {}, 0
    for g, n in enumerate(sizes):
        for _ in range(n):
            assignment[u] = g
            u += 1
    return GroupPartition(tuple(i / len(sizes) for i in range(len(sizes) + 1)), assignment)


class TestWeights:
    def test_inverse_size(self):
        assert group_weights(sized(100, 10, 1), 1) == pytest.approx({0: 0.01, 1: 0.1, 2: 1.0})

    def test_p_zero(self):
        assert group_weights(sized(7, 3, 9), 0) == {0: 1.0, 1: 1.0, 2: 1.0}

    def test_sqrt(self):
        assert group_weights(sized(4, 1), 0.5) == {0: 0.5, 1: 1.0}

    def test_empty_group_excluded(self):
        with pytest.warns(RuntimeWarning):
            assert group_weights(sized(4, 0, 2), 1) == pytest.approx({0: 0.25, 2: 0.5})

    @given(st.lists(st.integers(1, 50), min_size=2, max_size=4), st.integers(2, 4), st.floats(0, 2.5))
    def test_scaling(self, sizes, c, p):
        base = group_weights(sized(*sizes), p)
        scaled = group_weights(sized(*(n * c for n in sizes)), p)
        for g in base:
            assert scaled[g] == pytest.approx(base[g] * c ** -p)
