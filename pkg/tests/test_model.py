import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hgnnrec import model, training, tsg
from hgnnrec.data import EncodedSample
from hgnnrec.errors import ConfigError, DataError
from hgnnrec.model import Ablation, Hyper
from oracle import oracle_gat, oracle_yhat

DAY = tsg.DAY


# ---------------------------------------------------------------------------


def small_params(seed=0, n_items=10, d=4, heads=2, k=3, std=0.5, gamma=0.8):
    return training.init_params(n_items, Hyper(d=d, heads=heads, k=k, gamma=gamma), seed, std=std)


def test_gat_matches_scalar_oracle_on_three_nodes():
    rng = np.random.default_rng(0)
    A = np.array([[1.0, 0.5, 0.0], [0.5, 1.0, 0.25], [0.0, 0.25, 1.0]])
    X = rng.normal(size=(3, 4))
    Wh = rng.normal(size=(2, 2, 4))
    Wz = rng.normal(size=(4, 4))
    got = model.gat_layer(A, X, Wh, Wz, 0.8)
    want = np.array(oracle_gat(A.tolist(), X.tolist(), Wh.tolist(), Wz.tolist(), 0.8))
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_attention_rows_sum_to_one_and_respect_mask():
    rng = np.random.default_rng(1)
    A = np.array([[1.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.0]])
    alpha = model.attention_weights(A, rng.normal(size=(3, 4)), rng.normal(size=(2, 2, 4)), 0.8)
    np.testing.assert_allclose(alpha.sum(-1), 1.0, atol=1e-12)
    assert np.all(alpha[:, 0, 2] == 0) and np.all(alpha[:, 2, :2] == 0)


@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_scalar_pipeline(seed):
    rng = np.random.default_rng(seed)
    params = small_params(seed)
    times = np.cumsum(rng.uniform(0.1, 4, size=5) * DAY).astype(np.int64)
    items = rng.integers(10, size=5)
    sample = EncodedSample(0, tuple(items), tuple(times), 0, 0)
    t_v = int(times[-1] + 2 * DAY)
    for cand in range(10):
        tr = model.forward(sample, cand, t_v, params, 7 * DAY)
        want, beta, _ = oracle_yhat(params, items.tolist(), times.tolist(), cand, t_v, 7 * DAY)
        assert tr.yhat[0] == pytest.approx(want, abs=1e-12)
        np.testing.assert_allclose(tr.beta[0], beta, atol=1e-12)


def test_single_window_helpers_agree_with_forward():
    rng = np.random.default_rng(5)
    p = small_params(5)
    times = np.cumsum(rng.uniform(0.1, 4, size=6) * DAY).astype(np.int64)
    items = rng.integers(10, size=6)
    A, _ = tsg.adjacency(times, 7 * DAY, DAY)
    Z = model.gat_layer(A, p.X[items], p.gat1_Wh, p.gat1_Wz, p.hyper.gamma)
    S = model.assignment(A, Z, p.gat2_Wh, p.gat2_Wz, p.Ws, p.hyper.gamma)
    C = model.factor_embeddings(S, Z)
    t_fac = model.factor_timestamps(S, times)
    t_v = int(times[-1] + DAY * 3)
    yhat, beta = model.score(C, t_fac, 4, t_v, p.X, DAY)
    tr = model.forward(EncodedSample(0, tuple(items), tuple(times), 0, 0), 4, t_v, p, 7 * DAY)
    np.testing.assert_allclose(C, tr.C, atol=1e-12)
    np.testing.assert_allclose(t_fac, tr.t_fac, rtol=1e-12)
    assert yhat == pytest.approx(tr.yhat[0], abs=1e-12)
    np.testing.assert_allclose(beta, tr.beta[0], atol=1e-12)


def test_zero_factors_score_one_half():
    X = np.random.default_rng(0).normal(size=(6, 4))
    yhat, beta = model.score(np.zeros((5, 4)), np.zeros(5), 2, 10.0, X, DAY)
    assert abs(yhat - 0.5) <= 1e-12
    np.testing.assert_allclose(beta, 0.2)


def test_score_unknown_item():
    with pytest.raises(DataError):
        model.score(np.zeros((2, 3)), np.zeros(2), 9, 0.0, np.zeros((4, 3)), DAY)


def test_temporal_term_limits():
    tau, _ = model.temporal_term(np.array([0.0]), np.array([0.0, -DAY / 2, -2 * DAY, 4 * DAY]), DAY)
    np.testing.assert_array_equal(tau[0], [1.0, 1.0, 0.5, 0.25])


def test_gamma_one_ignores_adjacency_values():
    rng = np.random.default_rng(2)
    X, Wh, Wz = rng.normal(size=(4, 4)), rng.normal(size=(2, 2, 4)), rng.normal(size=(4, 4))
    A1 = np.array([[1, 0.5, 0.2, 0], [0.5, 1, 0.9, 0], [0.2, 0.9, 1, 0.3], [0, 0, 0.3, 1.0]])
    A2 = np.where(A1 > 0, rng.uniform(0.01, 1, size=A1.shape), 0.0)
    A2 = (A2 + A2.T) / 2
    np.fill_diagonal(A2, 1.0)
    np.testing.assert_allclose(model.gat_layer(A1, X, Wh, Wz, 1.0), model.gat_layer(A2, X, Wh, Wz, 1.0), atol=1e-14)
    assert not np.allclose(model.gat_layer(A1, X, Wh, Wz, 0.5), model.gat_layer(A2, X, Wh, Wz, 0.5))


def test_gat_layer_validates_inputs():
    X = np.zeros((3, 4))
    with pytest.raises(ValueError):
        model.gat_layer(np.eye(2), X, np.zeros((2, 2, 4)), np.zeros((4, 4)), 0.8)
    with pytest.raises(ValueError):
        model.gat_layer(np.eye(3), X, np.zeros((2, 2, 3)), np.zeros((4, 4)), 0.8)
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        model.gat_layer(np.eye(3), bad, np.zeros((2, 2, 4)), np.zeros((4, 4)), 0.8)


def test_hyper_validation():
    with pytest.raises(ConfigError):
        Hyper(d=6, heads=4)
    with pytest.raises(ConfigError):
        Hyper(d=8, heads=2, d_head=3)
    with pytest.raises(ConfigError):
        Hyper(gamma=0.0)
    assert Hyper(d=8, heads=2).d_head == 4


def test_no_gat2_gives_one_factor_per_node():
    p = small_params()
    s = EncodedSample(0, (1, 2, 3), (0, DAY, 2 * DAY), 0, 3 * DAY)
    tr = model.forward(s, [0, 1], 3 * DAY, p, 7 * DAY, Ablation(no_gat2=True))
    np.testing.assert_array_equal(tr.S, np.eye(3))
    assert tr.beta.shape == (2, 3)


def test_empty_factor_time_falls_back_to_mean():
    S = np.array([[1.0, 0.0], [1.0, 0.0]])
    np.testing.assert_allclose(model.factor_timestamps(S, np.array([10, 30])), [20.0, 20.0])


# ---------------------------------------------------------------------------
# randomized structural properties
# ---------------------------------------------------------------------------

windows = st.integers(0, 2**31 - 1).flatmap(
    lambda seed: st.tuples(st.just(seed), st.integers(2, 8), st.integers(1, 4), st.sampled_from([(2, 1), (4, 2), (6, 3)]))
)


def _instance(seed, n, k, dh):
    d, heads = dh
    rng = np.random.default_rng(seed)
    p = training.init_params(7, Hyper(d=d, heads=heads, k=k), seed % 1000, std=float(rng.uniform(0.05, 1.5)))
    gaps = rng.exponential(rng.uniform(0.1, 10), size=n) * DAY
    times = (np.cumsum(gaps) + 1e9).astype(np.int64)
    items = rng.integers(7, size=n)
    t_v = int(times[-1] + rng.uniform(0, 20) * DAY)
    return rng, p, items, times, t_v


@settings(max_examples=1000, deadline=None)
@given(windows)
def test_assignment_and_factor_weights_are_distributions(case):
    seed, n, k, dh = case
    _, p, items, times, t_v = _instance(seed, n, k, dh)
    tr = model.forward(EncodedSample(0, tuple(items), tuple(times), 0, 0), np.arange(7), t_v, p, 7 * DAY)
    assert np.all(np.abs(tr.S.sum(axis=1) - 1) <= 1e-9)
    assert np.all(np.abs(tr.beta.sum(axis=1) - 1) <= 1e-9)
    # strictly inside (0, 1) in exact arithmetic; float64 rounds |logit| > ~37 to the ends
    assert np.all((tr.yhat >= 0) & (tr.yhat <= 1)) and np.all(np.isfinite(tr.logit))


@settings(max_examples=1000, deadline=None)
@given(windows)
def test_relabeling_nodes_leaves_factors_and_scores_unchanged(case):
    seed, n, k, dh = case
    rng, p, items, times, t_v = _instance(seed, n, k, dh)
    A, _ = tsg.adjacency(times, 7 * DAY, DAY)
    perm = rng.permutation(n)
    g = p.hyper.gamma

    def run(A, X, t):
        Z = model.gat_layer(A, X, p.gat1_Wh, p.gat1_Wz, g)
        S = model.assignment(A, Z, p.gat2_Wh, p.gat2_Wz, p.Ws, g)
        C = model.factor_embeddings(S, Z)
        t_fac = model.factor_timestamps(S, t)
        return C, [model.score(C, t_fac, v, t_v, p.X, DAY)[0] for v in range(7)]

    C1, y1 = run(A, p.X[items], times)
    C2, y2 = run(A[np.ix_(perm, perm)], p.X[items[perm]], times[perm])
    assert np.max(np.abs(C1 - C2)) <= 1e-9
    assert np.max(np.abs(np.array(y1) - np.array(y2))) <= 1e-9


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_is_exact(tmp_path):
    p = small_params(3, gamma=0.7)
    model.save_checkpoint(p, tmp_path / "m.bin")
    q = model.load_checkpoint(tmp_path / "m.bin")
    assert q.hyper == p.hyper
    for name in model.PARAM_NAMES:
        np.testing.assert_array_equal(getattr(q, name), getattr(p, name))


def test_checkpoint_layout(tmp_path):
    p = small_params(n_items=5, d=4, heads=2, k=3)
    model.save_checkpoint(p, tmp_path / "m.bin")
    buf = (tmp_path / "m.bin").read_bytes()
    assert buf[:4] == b"HGN1"
    assert struct.unpack_from("<5I", buf, 4) == (5, 4, 2, 2, 3)
    assert struct.unpack_from("<2d", buf, 24) == (0.8, float(DAY))
    assert struct.unpack_from("<2I", buf, 40) == (5, 4)
    assert np.frombuffer(buf, "<f8", count=20, offset=48).tolist() == p.X.ravel().tolist()
    matrices = 1 + 2 + 1 + 2 + 1 + 1
    values = 5 * 4 + 2 * (2 * 2 * 4 + 4 * 4) + 4 * 3
    assert len(buf) == 40 + 8 * matrices + 8 * values


@pytest.mark.parametrize("mutate", ["magic", "truncate", "trailing", "shape"])
def test_corrupt_checkpoint_rejected(tmp_path, mutate):
    p = small_params()
    path = tmp_path / "m.bin"
    model.save_checkpoint(p, path)
    buf = bytearray(path.read_bytes())
    if mutate == "magic":
        buf[:4] = b"XXXX"
    elif mutate == "truncate":
        buf = buf[:-9]
    elif mutate == "trailing":
        buf += b"\0"
    else:
        struct.pack_into("<2I", buf, 40, 3, 3)
    path.write_bytes(bytes(buf))
    with pytest.raises(DataError):
        model.load_checkpoint(path)
