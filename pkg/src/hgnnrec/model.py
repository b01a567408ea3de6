"""Hierarchical graph attention model: forward pass, layer gradients, checkpoints.

Everything internal works on stacks of windows with a leading batch axis
``B``; the single-sample functions (``gat_layer``, ``assignment``, ``score``,
``forward`` ...) are thin wrappers with ``B = 1``. Windows are still
independent graphs: no tensor mixes two samples.

Shapes: ``N`` nodes per window, ``d`` embedding width, ``H`` heads of width
``dh`` (``H * dh == d``), ``K`` factors, ``C`` candidate items per sample.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import tsg
from .errors import ConfigError, DataError, NumericalError

LEAKY_SLOPE = 0.2
PARAM_NAMES = ("X", "gat1_Wh", "gat1_Wz", "gat2_Wh", "gat2_Wz", "Ws")


@dataclass(frozen=True)
class Hyper:
    d: int = 64
    heads: int = 2
    k: int = 5
    gamma: float = 0.8
    mu: float = float(tsg.DAY)
    d_head: int = 0  # 0 means d // heads

    def __post_init__(self):
        if self.d < 1 or self.heads < 1 or self.k < 1:
            raise ConfigError("d, heads and k must be positive")
        if self.d_head == 0:
            object.__setattr__(self, "d_head", self.d // self.heads)
        if self.d_head * self.heads != self.d:
            raise ConfigError(f"d_head * heads must equal d ({self.d_head} * {self.heads} != {self.d})")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.mu <= 0:
            raise ConfigError(f"mu must be positive, got {self.mu}")


@dataclass(frozen=True)
class Ablation:
    no_gat1: bool = False  # Z = X
    no_gat2: bool = False  # no clustering: C = Z, one factor per node
    no_timespan: bool = False  # unit weight on every issued edge, no temporal term in scoring


@dataclass
class ModelParams:
    X: np.ndarray  # (V, d)
    gat1_Wh: np.ndarray  # (H, dh, d)
    gat1_Wz: np.ndarray  # (d, H*dh)
    gat2_Wh: np.ndarray
    gat2_Wz: np.ndarray
    Ws: np.ndarray  # (d, K)
    hyper: Hyper = field(default_factory=Hyper)

    def __post_init__(self):
        self.check_shapes()

    @property
    def n_items(self) -> int:
        return self.X.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return replace(self, **{k: v.copy() for k, v in self.as_dict().items()})

    def check_shapes(self) -> None:
        h = self.hyper
        expected = {
            "X": (self.X.shape[0], h.d),
            "gat1_Wh": (h.heads, h.d_head, h.d),
            "gat1_Wz": (h.d, h.heads * h.d_head),
            "gat2_Wh": (h.heads, h.d_head, h.d),
            "gat2_Wz": (h.d, h.heads * h.d_head),
            "Ws": (h.d, h.k),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ConfigError(f"{name} has shape {got}, expected {shape}")

    def check_finite(self) -> None:
        for name, arr in self.as_dict().items():
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite entries in parameter {name}")


# ---------------------------------------------------------------------------
# graph attention layer
# ---------------------------------------------------------------------------


@dataclass
class GATCache:
    Xin: np.ndarray  # (B, N, d)
    P: np.ndarray  # (B, H, N, dh) projected nodes
    E: np.ndarray  # (B, H, N, N) mixed correlation before LeakyReLU
    alpha: np.ndarray  # (B, H, N, N)
    U: np.ndarray  # (B, H, N, dh) aggregate before ELU
    Zt: np.ndarray  # (B, N, H*dh) concatenated heads


def gat_forward(A, mask, Xin, Wh, Wz, gamma):
    """Timespan-mixed multi-head attention over each window graph."""
    B, N, _ = Xin.shape
    H, dh, _ = Wh.shape
    P = Xin[:, None] @ Wh.transpose(0, 2, 1)[None]
    E = gamma * (P @ P.transpose(0, 1, 3, 2)) + (1.0 - gamma) * A[:, None]
    L = np.where(E > 0, E, LEAKY_SLOPE * E)
    L = np.where(mask[:, None], L, -np.inf)
    L = L - L.max(axis=-1, keepdims=True)
    alpha = np.exp(L)
    alpha /= alpha.sum(axis=-1, keepdims=True)
    U = alpha @ P
    O = np.where(U > 0, U, np.expm1(np.minimum(U, 0.0)))
    Zt = O.transpose(0, 2, 1, 3).reshape(B, N, H * dh)
    Z = Zt @ Wz.T
    return Z, GATCache(Xin, P, E, alpha, U, Zt)


def gat_backward(dZ, cache: GATCache, Wh, Wz, gamma):
    """Returns (dXin, dWh, dWz) summed over the batch."""
    B, N, _ = dZ.shape
    H, dh, _ = Wh.shape
    dWz = np.einsum("bnd,bnk->dk", dZ, cache.Zt)
    dO = (dZ @ Wz).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
    dU = dO * np.where(cache.U > 0, 1.0, np.exp(np.minimum(cache.U, 0.0)))
    P, alpha = cache.P, cache.alpha
    dalpha = dU @ P.transpose(0, 1, 3, 2)
    dP = alpha.transpose(0, 1, 3, 2) @ dU
    dL = alpha * (dalpha - (alpha * dalpha).sum(axis=-1, keepdims=True))
    dE = dL * np.where(cache.E > 0, 1.0, LEAKY_SLOPE)
    dP += gamma * ((dE + dE.transpose(0, 1, 3, 2)) @ P)
    dWh = np.einsum("bhne,bnd->hed", dP, cache.Xin)
    dXin = np.einsum("bhne,hed->bnd", dP, Wh)
    return dXin, dWh, dWz


# ---------------------------------------------------------------------------
# hierarchical encoder
# ---------------------------------------------------------------------------


@dataclass
class Encoding:
    """Per-window intermediates of the clustering stage."""

    items: np.ndarray  # (B, N)
    A: np.ndarray  # adjacency as used by attention (binary under no_timespan)
    mask: np.ndarray
    t_ref: np.ndarray  # (B,) int seconds; times below are relative to it
    node_t: np.ndarray  # (B, N) float
    Xw: np.ndarray  # (B, N, d)
    Z: np.ndarray  # (B, N, d)
    Z2: np.ndarray | None  # second attention output, (B, N, d)
    S: np.ndarray  # (B, N, K)
    C: np.ndarray  # (B, K, d)
    t_fac: np.ndarray  # (B, K) relative seconds
    cache1: GATCache | None
    cache2: GATCache | None
    ablation: Ablation


# a factor whose total assignment mass underflows below this has no members;
# its timestamp falls back to the plain mean of node times
EMPTY_MASS = 1e-200


def _weighted_times(S, node_t):
    """Assignment-weighted mean node time per factor, shape (..., K)."""
    colsum = S.sum(axis=-2)
    live = colsum > EMPTY_MASS
    weighted = np.einsum("...nk,...n->...k", S, node_t) / np.where(live, colsum, 1.0)
    fallback = np.broadcast_to(node_t.mean(axis=-1)[..., None], weighted.shape)
    return np.where(live, weighted, fallback)


def encode(params: ModelParams, items, times, T: float, ablation: Ablation = Ablation()) -> Encoding:
    items = np.asarray(items, dtype=np.int64)
    times = np.asarray(times, dtype=np.int64)
    if items.ndim != 2 or items.shape != times.shape:
        raise ValueError(f"items and times must both be (B, N), got {items.shape} and {times.shape}")
    if items.size and (items.min() < 0 or items.max() >= params.n_items):
        raise DataError("item index out of vocabulary range")
    h = params.hyper
    A, mask = tsg.adjacency(times, T, h.mu)
    if ablation.no_timespan:
        A = mask.astype(np.float64)
    t_ref = times[:, -1]
    node_t = (times - t_ref[:, None]).astype(np.float64)
    Xw = params.X[items]
    if ablation.no_gat1:
        Z, cache1 = Xw, None
    else:
        Z, cache1 = gat_forward(A, mask, Xw, params.gat1_Wh, params.gat1_Wz, h.gamma)
    if ablation.no_gat2:
        B, N = items.shape
        S = np.broadcast_to(np.eye(N), (B, N, N))
        return Encoding(items, A, mask, t_ref, node_t, Xw, Z, None, S, Z, node_t, cache1, None, ablation)
    Z2, cache2 = gat_forward(A, mask, Z, params.gat2_Wh, params.gat2_Wz, h.gamma)
    G = Z2 @ params.Ws
    G = G - G.max(axis=-1, keepdims=True)
    S = np.exp(G)
    S /= S.sum(axis=-1, keepdims=True)
    C = S.transpose(0, 2, 1) @ Z
    t_fac = _weighted_times(S, node_t)
    return Encoding(items, A, mask, t_ref, node_t, Xw, Z, Z2, S, C, t_fac, cache1, cache2, ablation)


def encoding_backward(enc: Encoding, params: ModelParams, dC, dt_fac, dS_extra=None):
    """Backpropagate factor-level gradients to parameters.

    Returns (dXw, grads) where ``dXw`` is the gradient w.r.t. the gathered
    window embeddings and ``grads`` holds the attention and assignment weights.
    """
    h = params.hyper
    grads = {}
    if enc.ablation.no_gat2:
        dZ = dC  # C = Z; factor times are the node times, constant
    else:
        S = enc.S
        colsum = S.sum(axis=1)
        live = colsum > EMPTY_MASS
        scale = np.where(live, dt_fac, 0.0) / np.where(live, colsum, 1.0)
        dS = np.einsum("bkd,bnd->bnk", dC, enc.Z)
        dS += scale[:, None, :] * (enc.node_t[:, :, None] - enc.t_fac[:, None, :])
        if dS_extra is not None:
            dS += dS_extra
        dZ = S @ dC
        dG = S * (dS - (S * dS).sum(axis=-1, keepdims=True))
        grads["Ws"] = np.einsum("bnd,bnk->dk", enc.Z2, dG)
        dZ2 = dG @ params.Ws.T
        dZ1, grads["gat2_Wh"], grads["gat2_Wz"] = gat_backward(
            dZ2, enc.cache2, params.gat2_Wh, params.gat2_Wz, h.gamma
        )
        dZ = dZ + dZ1
    if enc.ablation.no_gat1:
        return dZ, grads
    dXw, grads["gat1_Wh"], grads["gat1_Wz"] = gat_backward(
        dZ, enc.cache1, params.gat1_Wh, params.gat1_Wz, h.gamma
    )
    return dXw, grads


# ---------------------------------------------------------------------------
# temporal-attentive scoring
# ---------------------------------------------------------------------------


@dataclass
class Scores:
    xv: np.ndarray  # (B or 1, C, d)
    r: np.ndarray  # (B, C, K) factor-candidate dot products
    tau: np.ndarray  # (B, C, K)
    dtau_dt: np.ndarray | None  # d tau / d t_fac, (B, C, K)
    beta: np.ndarray  # (B, C, K)
    logit: np.ndarray  # (B, C)

    @property
    def yhat(self) -> np.ndarray:
        return expit(self.logit)


def temporal_term(t_v, t_fac, mu):
    """Capped inverse timespan between candidate time and factor times, and its slope in t_fac."""
    D = t_v[..., None] - t_fac[..., None, :]
    span = np.abs(D)
    inside = span <= mu
    safe = np.where(inside, mu, span)
    tau = np.where(inside, 1.0, mu / safe)
    slope = np.where(inside, 0.0, mu * np.sign(D) / (safe * safe))
    return tau, slope


def score_candidates(enc: Encoding, params: ModelParams, cand_items=None, cand_times=None) -> Scores:
    """Score candidates for every window.

    ``cand_items`` is (B, C); ``None`` scores the whole catalog. ``cand_times``
    is (B,) or (B, C) absolute seconds; ``None`` uses the window's last time.
    """
    B, K = enc.C.shape[0], enc.C.shape[1]
    if cand_items is None:
        xv = params.X[None]
        n_cand = params.n_items
    else:
        cand_items = np.asarray(cand_items, dtype=np.int64)
        if cand_items.size and (cand_items.min() < 0 or cand_items.max() >= params.n_items):
            raise DataError("candidate item index out of vocabulary range")
        xv = params.X[cand_items]
        n_cand = cand_items.shape[1]
    r = xv @ enc.C.transpose(0, 2, 1)
    if enc.ablation.no_timespan:
        tau = np.zeros((B, 1, K))
        slope = None
    else:
        if cand_times is None:
            t_v = np.zeros((B, 1))
        else:
            cand_times = np.asarray(cand_times, dtype=np.int64)
            if cand_times.ndim == 1:
                cand_times = cand_times[:, None]
            t_v = (cand_times - enc.t_ref[:, None]).astype(np.float64)
        tau, slope = temporal_term(t_v, enc.t_fac, params.hyper.mu)
    q = r + tau
    q = q - q.max(axis=-1, keepdims=True)
    beta = np.exp(q)
    beta /= beta.sum(axis=-1, keepdims=True)
    logit = (beta * r).sum(axis=-1)
    assert logit.shape == (B, n_cand)
    return Scores(xv, r, tau, slope, beta, logit)


def score_backward(sc: Scores, enc: Encoding, dlogit):
    """Returns (dC, dt_fac, dxv) for an upstream gradient on the logits."""
    dlogit = dlogit[..., None]
    dbeta = dlogit * sc.r
    dr = dlogit * sc.beta
    dq = sc.beta * (dbeta - (sc.beta * dbeta).sum(axis=-1, keepdims=True))
    dr = dr + dq
    dC = np.einsum("bck,bcd->bkd", dr, np.broadcast_to(sc.xv, dr.shape[:2] + sc.xv.shape[2:]))
    dxv = dr @ enc.C
    if sc.dtau_dt is None:
        dt_fac = np.zeros(enc.t_fac.shape)
    else:
        dt_fac = (dq * sc.dtau_dt).sum(axis=1)
    return dC, dt_fac, dxv


# ---------------------------------------------------------------------------
# single-window API
# ---------------------------------------------------------------------------


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {name}")


def gat_layer(A, X_in, Wh, Wz, gamma: float) -> np.ndarray:
    """One attention stage on one graph. ``Wh`` is (H, dh, d) or a list of (dh, d)."""
    A = np.asarray(A, dtype=np.float64)
    X_in = np.asarray(X_in, dtype=np.float64)
    Wh = np.asarray(Wh, dtype=np.float64)
    Wz = np.asarray(Wz, dtype=np.float64)
    N, d = X_in.shape
    if A.shape != (N, N):
        raise ValueError(f"adjacency shape {A.shape} does not match {N} nodes")
    if Wh.ndim != 3 or Wh.shape[2] != d:
        raise ValueError(f"head weights shape {Wh.shape} incompatible with width {d}")
    if Wz.shape != (d, Wh.shape[0] * Wh.shape[1]):
        raise ValueError(f"output weights shape {Wz.shape} incompatible with heads {Wh.shape[:2]}")
    for name, arr in (("A", A), ("X_in", X_in), ("Wh", Wh), ("Wz", Wz)):
        _check_finite(name, arr)
    Z, _ = gat_forward(A[None], A[None] > 0, X_in[None], Wh, Wz, gamma)
    return Z[0]


def attention_weights(A, X_in, Wh, gamma: float) -> np.ndarray:
    """Attention coefficients (H, N, N) of one stage; exposed for inspection."""
    A = np.asarray(A, dtype=np.float64)
    d = np.asarray(X_in).shape[1]
    Wz = np.zeros((d, Wh.shape[0] * Wh.shape[1]))
    _, cache = gat_forward(A[None], A[None] > 0, np.asarray(X_in, float)[None], np.asarray(Wh, float), Wz, gamma)
    return cache.alpha[0]


def softmax_rows(G):
    G = G - G.max(axis=-1, keepdims=True)
    e = np.exp(G)
    return e / e.sum(axis=-1, keepdims=True)


def assignment(A, Z, Wh2, Wz2, Ws, gamma: float) -> np.ndarray:
    _check_finite("Z", np.asarray(Z))
    return softmax_rows(gat_layer(A, Z, Wh2, Wz2, gamma) @ np.asarray(Ws, dtype=np.float64))


def factor_embeddings(S, Z) -> np.ndarray:
    S, Z = np.asarray(S, dtype=np.float64), np.asarray(Z, dtype=np.float64)
    if S.shape[0] != Z.shape[0]:
        raise ValueError(f"S has {S.shape[0]} rows but Z has {Z.shape[0]}")
    return S.T @ Z


def factor_timestamps(S, node_times) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    node_times = np.asarray(node_times)
    ref = node_times.min()
    rel = (node_times - ref).astype(np.float64)
    return ref + _weighted_times(S, rel)


def score(C, t_fac, v_index: int, t_v: float, X, mu: float, use_time: bool = True):
    """Probability of interacting with item ``v_index`` at ``t_v`` and the factor weights."""
    X = np.asarray(X, dtype=np.float64)
    if not 0 <= v_index < X.shape[0]:
        raise DataError(f"item index {v_index} not in vocabulary of {X.shape[0]} items")
    C = np.asarray(C, dtype=np.float64)
    r = C @ X[v_index]
    if use_time:
        tau, _ = temporal_term(np.asarray(float(t_v)), np.asarray(t_fac, dtype=np.float64), mu)
        tau = tau.reshape(r.shape)
    else:
        tau = np.zeros_like(r)
    beta = softmax_rows(r + tau)
    return float(expit(beta @ r)), beta


@dataclass
class ForwardTrace:
    graph: tsg.TimespanGraph
    X_window: np.ndarray
    Z: np.ndarray
    S: np.ndarray
    C: np.ndarray
    t_fac: np.ndarray  # absolute seconds
    candidates: np.ndarray
    candidate_time: int
    beta: np.ndarray  # (C, K)
    logit: np.ndarray  # (C,)
    yhat: np.ndarray  # (C,)
    contributions: np.ndarray  # beta_j * (c_j . v), (C, K)
    encoding: Encoding = field(repr=False)
    scores: Scores = field(repr=False)


def forward(sample, candidates, candidate_time: int, params: ModelParams, T: float,
            ablation: Ablation = Ablation()) -> ForwardTrace:
    """Full pass for one window against one or more candidate items.

    ``sample`` needs ``items`` and ``times``; ``candidates`` is an int or a sequence.
    """
    cands = np.atleast_1d(np.asarray(candidates, dtype=np.int64))
    items = np.asarray(sample.items, dtype=np.int64)[None]
    times = np.asarray(sample.times, dtype=np.int64)[None]
    enc = encode(params, items, times, T, ablation)
    sc = score_candidates(enc, params, cands[None], np.array([candidate_time]))
    graph = tsg.TimespanGraph(items[0], times[0], enc.A[0], float(T), params.hyper.mu)
    return ForwardTrace(
        graph=graph,
        X_window=enc.Xw[0],
        Z=enc.Z[0],
        S=np.array(enc.S[0]),
        C=enc.C[0],
        t_fac=enc.t_fac[0] + enc.t_ref[0],
        candidates=cands,
        candidate_time=int(candidate_time),
        beta=sc.beta[0],
        logit=sc.logit[0],
        yhat=sc.yhat[0],
        contributions=sc.beta[0] * sc.r[0],
        encoding=enc,
        scores=sc,
    )


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

MAGIC = b"HGN1"


def _matrices(params: ModelParams):
    yield params.X
    yield from params.gat1_Wh
    yield params.gat1_Wz
    yield from params.gat2_Wh
    yield params.gat2_Wz
    yield params.Ws


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    h = params.hyper
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", params.n_items, h.d, h.d_head, h.heads, h.k))
        fh.write(struct.pack("<2d", h.gamma, h.mu))
        for m in _matrices(params):
            fh.write(struct.pack("<2I", *m.shape))
            fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    try:
        n_items, d, d_head, heads, k = struct.unpack_from("<5I", buf, 4)
        gamma, mu = struct.unpack_from("<2d", buf, 24)
    except struct.error:
        raise DataError(f"{path}: truncated header") from None
    hyper = Hyper(d=d, heads=heads, k=k, gamma=gamma, mu=mu, d_head=d_head)
    offset = 40

    def read(shape):
        nonlocal offset
        try:
            rows, cols = struct.unpack_from("<2I", buf, offset)
        except struct.error:
            raise DataError(f"{path}: truncated checkpoint") from None
        if (rows, cols) != shape:
            raise DataError(f"{path}: matrix shape {(rows, cols)} does not match header {shape}")
        offset += 8
        size = rows * cols * 8
        if offset + size > len(buf):
            raise DataError(f"{path}: truncated checkpoint")
        m = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols)
        offset += size
        return m.astype(np.float64)

    X = read((n_items, d))
    w1h = np.stack([read((d_head, d)) for _ in range(heads)])
    w1z = read((d, heads * d_head))
    w2h = np.stack([read((d_head, d)) for _ in range(heads)])
    w2z = read((d, heads * d_head))
    ws = read((d, k))
    if offset != len(buf):
        raise DataError(f"{path}: {len(buf) - offset} trailing bytes")
    return ModelParams(X, w1h, w1z, w2h, w2z, ws, hyper)
