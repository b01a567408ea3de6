import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hgnnrec import tsg
from hgnnrec.errors import ConfigError

DAY = tsg.DAY


def test_weight_at_twice_mu_is_exactly_half():
    assert tsg.edge_weight(0, 2 * DAY, DAY) == 0.5
    assert tsg.edge_weight(5 * DAY, 3 * DAY, DAY) == 0.5


def test_weight_is_one_inside_mu():
    assert tsg.edge_weight(0, 0, DAY) == 1.0
    assert tsg.edge_weight(0, DAY, DAY) == 1.0
    assert tsg.edge_weight(0, DAY // 2, DAY) == 1.0


def test_weight_rejects_nonpositive_mu():
    with pytest.raises(ConfigError):
        tsg.edge_weight(0, 1, 0)


def test_threshold_drops_far_pairs_but_keeps_consecutive():
    times = np.array([0, DAY, 30 * DAY, 31 * DAY])
    A, mask = tsg.adjacency(times, T=7 * DAY, mu=DAY)
    assert mask[0, 1] and mask[2, 3]
    assert mask[1, 2]  # consecutive guard despite a 29-day gap
    assert A[1, 2] == pytest.approx(1 / 29)
    assert not mask[0, 2] and A[0, 2] == 0.0
    assert not mask[0, 3] and A[1, 3] == 0.0


def test_span_equal_to_T_is_an_edge():
    times = np.array([0, 3 * DAY, 7 * DAY])
    _, mask = tsg.adjacency(times, T=7 * DAY, mu=DAY)
    assert mask[0, 2]


def test_repeated_items_are_separate_nodes():
    g = tsg.build_graph([4, 4, 4], [0, 10, 20], 7 * DAY, DAY)
    assert g.n == 3
    assert np.all(g.adjacency == 1.0)


def test_adjacency_csv_round_trip():
    g = tsg.build_graph([1, 2, 3], [0, 2 * DAY, 40 * DAY], 7 * DAY, DAY)
    back = np.array([[float(x) for x in line.split(",")] for line in g.to_csv().strip().splitlines()])
    np.testing.assert_array_equal(back, g.adjacency)


def test_batched_matches_single():
    rng = np.random.default_rng(3)
    times = np.sort(rng.integers(0, 60 * DAY, size=(5, 8)), axis=1)
    A, _ = tsg.adjacency(times, 7 * DAY, DAY)
    for b in range(5):
        np.testing.assert_array_equal(A[b], tsg.adjacency(times[b], 7 * DAY, DAY)[0])


def test_entries_match_pairwise_weight():
    times = np.array([0, 3600, 2 * DAY, 9 * DAY, 9 * DAY + 5])
    A, mask = tsg.adjacency(times, 7 * DAY, DAY)
    for i in range(5):
        for j in range(5):
            if i == j:
                assert A[i, j] == 1.0
            elif mask[i, j]:
                assert A[i, j] == tsg.edge_weight(times[i], times[j], DAY)


@settings(max_examples=1000, deadline=None)
@given(
    st.lists(st.integers(0, 10**8), min_size=1, max_size=14),
    st.floats(0.5, 40.0),
    st.floats(0.01, 5.0),
)
def test_adjacency_symmetric_with_unit_diagonal(raw, t_days, mu_days):
    times = np.sort(np.array(raw, dtype=np.int64))
    A, mask = tsg.adjacency(times, t_days * DAY, mu_days * DAY)
    np.testing.assert_array_equal(A, A.T)
    np.testing.assert_array_equal(np.diag(A), 1.0)
    assert np.all((A > 0) == mask)
    assert np.all((A >= 0) & (A <= 1))
