"""Losses, exact gradients, Adam, negative sampling and the epoch loop."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import entr, expit, log_expit

from . import evaluation, tsg
from .data import EncodedSample, SampleArrays, user_histories
from .errors import ConfigError, DataError, NumericalError
from .model import Ablation, Encoding, Hyper, ModelParams, Scores, encode, encoding_backward, score_backward, score_candidates

log = logging.getLogger(__name__)

INIT_STD = 0.1
# Gradient work is split into fixed-size chunks summed in order, so the worker
# count never changes floating-point results.
CHUNK = 64


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 1024
    lambda_ent: float = 1e-4
    lambda_l2: float = 1e-4
    negatives: int = 1
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    t_days: float = 7.0
    no_gat1: bool = False
    no_gat2: bool = False
    no_timespan: bool = False
    no_entropy: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    workers: int = 1
    # BPR on sigmoid outputs saturates once scores grow; raw scores are the default
    bpr_on_probability: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.lambda_ent < 0 or self.lambda_l2 < 0:
            raise ConfigError("regularization weights must be non-negative")
        if self.batch_size < 1 or self.negatives < 1:
            raise ConfigError("batch_size and negatives must be >= 1")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("max_epochs must be >= 0 and patience >= 1")
        if self.t_days <= 0:
            raise ConfigError("t_days must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam constants")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def ablation(self) -> Ablation:
        return Ablation(self.no_gat1, self.no_gat2, self.no_timespan)

    @property
    def T(self) -> float:
        return self.t_days * tsg.DAY

    @property
    def entropy_weight(self) -> float:
        return 0.0 if self.no_entropy else self.lambda_ent

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def init_params(n_items: int, hyper: Hyper, seed: int, std: float = INIT_STD) -> ModelParams:
    if n_items < 1:
        raise ConfigError("vocabulary is empty")
    rng = np.random.default_rng(seed)
    h = hyper
    draw = lambda *shape: rng.normal(0.0, std, size=shape)
    return ModelParams(
        X=draw(n_items, h.d),
        gat1_Wh=draw(h.heads, h.d_head, h.d),
        gat1_Wz=draw(h.d, h.heads * h.d_head),
        gat2_Wh=draw(h.heads, h.d_head, h.d),
        gat2_Wz=draw(h.d, h.heads * h.d_head),
        Ws=draw(h.d, h.k),
        hyper=h,
    )


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def bpr_pair_loss(y_pos, y_neg):
    return -log_expit(np.subtract(y_pos, y_neg))


def entropy_loss(S) -> float:
    """Mean row entropy of an assignment matrix (0 log 0 taken as 0)."""
    S = np.asarray(S, dtype=np.float64)
    return float(entr(S).sum(axis=-1).mean(axis=-1))


@dataclass
class BatchTrace:
    """Forward intermediates for positives (column 0) and their negatives."""

    arrays: SampleArrays
    negatives: np.ndarray  # (B, n_neg)
    enc: Encoding | None
    scores: Scores | None

    @property
    def candidates(self) -> np.ndarray:
        return np.concatenate([self.arrays.targets[:, None], self.negatives], axis=1)

    def touched_rows(self) -> np.ndarray:
        return np.unique(np.concatenate([self.arrays.items.ravel(), self.candidates.ravel()]))


def forward_batch(params: ModelParams, arrays: SampleArrays, negatives, config: TrainConfig) -> BatchTrace:
    negatives = np.asarray(negatives, dtype=np.int64)
    negatives = negatives.reshape(len(arrays), negatives.shape[-1] if negatives.ndim == 2 else -1)
    if len(arrays) == 0:
        return BatchTrace(arrays, negatives, None, None)
    enc = encode(params, arrays.items, arrays.times, config.T, config.ablation)
    cands = np.concatenate([arrays.targets[:, None], negatives], axis=1)
    sc = score_candidates(enc, params, cands, arrays.target_times)
    return BatchTrace(arrays, negatives, enc, sc)


def _uses_entropy(trace: BatchTrace, config: TrainConfig) -> bool:
    return config.entropy_weight > 0 and not trace.enc.ablation.no_gat2


def data_loss(trace: BatchTrace, config: TrainConfig) -> float:
    if trace.enc is None:
        return 0.0
    y = trace.scores.yhat if config.bpr_on_probability else trace.scores.logit
    loss = float(bpr_pair_loss(y[:, :1], y[:, 1:]).sum())
    if _uses_entropy(trace, config):
        loss += config.entropy_weight * float(entr(trace.enc.S).sum(axis=-1).mean(axis=-1).sum())
    return loss


def l2_loss(params: ModelParams, rows: np.ndarray, config: TrainConfig) -> float:
    total = float(np.sum(params.X[rows] ** 2))
    for name, arr in params.as_dict().items():
        if name != "X":
            total += float(np.sum(arr * arr))
    return config.lambda_l2 * total


def total_loss(trace: BatchTrace, params: ModelParams, config: TrainConfig) -> float:
    """BPR over every (positive, negative) pair + entropy per sample + L2 on touched parameters."""
    return data_loss(trace, config) + l2_loss(params, trace.touched_rows(), config)


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.as_dict().items()}


def data_grads(trace: BatchTrace, params: ModelParams, config: TrainConfig) -> dict[str, np.ndarray]:
    grads = zero_grads(params)
    if trace.enc is None:
        return grads
    enc, sc = trace.enc, trace.scores
    y = sc.yhat if config.bpr_on_probability else sc.logit
    g = -expit(y[:, 1:] - y[:, :1])  # d bpr / d y_pos per pair
    dlogit = np.concatenate([g.sum(axis=1, keepdims=True), -g], axis=1)
    if config.bpr_on_probability:
        dlogit *= y * (1.0 - y)
    dC, dt_fac, dxv = score_backward(sc, enc, dlogit)
    dS_extra = None
    if _uses_entropy(trace, config):
        n = enc.S.shape[1]
        dS_extra = -config.entropy_weight * (np.log(np.maximum(enc.S, 1e-300)) + 1.0) / n
    dXw, layer_grads = encoding_backward(enc, params, dC, dt_fac, dS_extra)
    grads.update(layer_grads)
    np.add.at(grads["X"], enc.items, dXw)
    np.add.at(grads["X"], trace.candidates, dxv)
    return grads


def add_l2_grads(grads, params: ModelParams, rows: np.ndarray, config: TrainConfig) -> None:
    c = 2.0 * config.lambda_l2
    for name, arr in params.as_dict().items():
        if name == "X":
            grads["X"][rows] += c * arr[rows]
        else:
            grads[name] += c * arr


def check_grads(grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")


def backward(trace: BatchTrace, params: ModelParams, config: TrainConfig) -> dict[str, np.ndarray]:
    """Exact gradient of ``total_loss`` w.r.t. every parameter matrix."""
    grads = data_grads(trace, params, config)
    add_l2_grads(grads, params, trace.touched_rows(), config)
    check_grads(grads)
    return grads


def loss_and_grads(params, arrays: SampleArrays, negatives, config: TrainConfig, pool=None):
    """``total_loss`` and ``backward`` for a batch, computed in fixed chunks."""
    negatives = np.asarray(negatives, dtype=np.int64).reshape(len(arrays), -1)
    bounds = [(s, min(s + CHUNK, len(arrays))) for s in range(0, len(arrays), CHUNK)]

    def run(bound):
        lo, hi = bound
        trace = forward_batch(params, arrays[lo:hi], negatives[lo:hi], config)
        return data_loss(trace, config), data_grads(trace, params, config)

    results = list(pool.map(run, bounds)) if pool is not None else [run(b) for b in bounds]
    grads = zero_grads(params)
    loss = 0.0
    for chunk_loss, chunk_grads in results:
        loss += chunk_loss
        for name in grads:
            grads[name] += chunk_grads[name]
    rows = np.unique(np.concatenate([arrays.items.ravel(), arrays.targets, negatives.ravel()]))
    loss += l2_loss(params, rows, config)
    add_l2_grads(grads, params, rows, config)
    check_grads(grads)
    return loss, grads


# ---------------------------------------------------------------------------
# negatives and optimizer
# ---------------------------------------------------------------------------


def sample_negatives(history, n_items: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` distinct items outside ``history``, uniformly at random."""
    history = set(int(i) for i in history)
    free = n_items - len(history & set(range(n_items)))
    if free < count:
        raise DataError(f"cannot draw {count} negatives: only {free} items outside the user's history")
    if 2 * len(history) > n_items:
        allowed = np.setdiff1d(np.arange(n_items), np.fromiter(history, dtype=np.int64))
        return rng.choice(allowed, size=count, replace=False)
    picked: list[int] = []
    while len(picked) < count:
        cand = int(rng.integers(n_items))
        if cand not in history and cand not in picked:
            picked.append(cand)
    return np.array(picked, dtype=np.int64)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(zero_grads(params), zero_grads(params), 0)


def adam_step(params: ModelParams, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update, in place. Returns (params, state)."""
    b1, b2, lr, eps = config.adam_beta1, config.adam_beta2, config.learning_rate, config.adam_eps
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, arr in params.as_dict().items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_hit10: float
    val_rr10: float
    seconds: float


LOG_FIELDS = ["epoch", "train_loss", "val_hit10", "val_rr10", "seconds"]


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0


def write_log(rows: Sequence[EpochLog], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_hit10), repr(r.val_rr10), f"{r.seconds:.3f}"])


def train(
    splits: Mapping[str, Sequence[EncodedSample]],
    n_items: int,
    hyper: Hyper,
    config: TrainConfig,
    on_epoch=None,
) -> TrainResult:
    """Fit parameters on ``splits['train']`` and keep the best validation Hit@10 snapshot.

    Negatives are drawn outside each user's full history (all splits given).
    ``on_epoch(epoch, params)`` is called after every epoch if supplied;
    returning True from it ends training after that epoch.
    """
    train_samples = list(splits.get("train", []))
    if not train_samples:
        raise DataError("training split is empty")
    val_samples = list(splits.get("validation", []))
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    params = init_params(n_items, hyper, int(seeds[0].generate_state(1)[0]))
    result = TrainResult(params.copy())
    if config.max_epochs == 0:
        return result
    rng = np.random.default_rng(seeds[1])
    history = user_histories(*splits.values())
    arrays = SampleArrays.from_samples(train_samples)
    state = AdamState.zeros(params)
    best = -1.0
    stale = 0
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            start = time.perf_counter()
            order = rng.permutation(len(arrays))
            epoch_loss = 0.0
            for lo in range(0, len(order), config.batch_size):
                batch = arrays[order[lo : lo + config.batch_size]]
                negs = np.stack(
                    [sample_negatives(history.get(int(u), ()), n_items, config.negatives, rng) for u in batch.users]
                )
                loss, grads = loss_and_grads(params, batch, negs, config, pool)
                adam_step(params, grads, state, config)
                epoch_loss += loss
            params.check_finite()
            if val_samples:
                report = evaluation.evaluate(params, val_samples, (10,), config.T, config.ablation, pool=pool)
                hit, rr = report.hit[0], report.rr[0]
            else:
                hit = rr = float("nan")
            row = EpochLog(epoch, epoch_loss / len(arrays), hit, rr, time.perf_counter() - start)
            result.log.append(row)
            log.info("epoch %d loss %.6f val hit@10 %.4f rr@10 %.4f", epoch, row.train_loss, hit, rr)
            halt = on_epoch is not None and on_epoch(epoch, params) is True
            if not val_samples or hit > best:
                best = hit
                stale = 0
                result.params = params.copy()
                result.best_epoch = epoch
            else:
                stale += 1
                if stale >= config.patience:
                    break
            if halt:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return result


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def numeric_grads(loss_fn, params: ModelParams, step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn(params)`` for every parameter entry."""
    out = {}
    for name, arr in params.as_dict().items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn(params)
            flat[i] = orig - step
            down = loss_fn(params)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        out[name] = g
    return out


def relative_errors(analytic, numeric, abs_floor: float = 1e-7) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    # entries below the floor in magnitude are judged on absolute difference
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(scale > abs_floor, diff / scale, np.where(diff <= abs_floor, 0.0, np.inf))
    return rel


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    seconds: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def random_instance(rng, n: int, n_items: int, batch: int):
    """Random windows with day-scale gaps for gradient checks."""
    samples = []
    for u in range(batch):
        gaps = rng.uniform(0.1, 3.0, size=n) * tsg.DAY
        times = np.cumsum(gaps).astype(np.int64) + 10 * tsg.DAY
        items = rng.integers(n_items, size=n)
        target_time = int(times[-1] + rng.uniform(0.5, 4.0) * tsg.DAY)
        samples.append(EncodedSample(u, tuple(int(i) for i in items), tuple(int(t) for t in times),
                                     int(rng.integers(n_items)), target_time))
    return samples


def gradcheck(
    seed: int = 0,
    n: int = 4,
    d: int = 4,
    heads: int = 2,
    k: int = 3,
    n_items: int = 8,
    batch: int = 2,
    negatives: int = 1,
    gamma: float = 0.8,
    lambda_ent: float = 1e-4,
    lambda_l2: float = 1e-4,
    ablation: Ablation = Ablation(),
    bpr_on_probability: bool = False,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    init_std: float = 0.5,
) -> GradcheckReport:
    """Compare ``backward`` with central differences of ``total_loss`` on a random instance."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    hyper = Hyper(d=d, heads=heads, k=k, gamma=gamma)
    params = init_params(n_items, hyper, seed, std=init_std)
    config = TrainConfig(
        lambda_ent=lambda_ent, lambda_l2=lambda_l2, negatives=negatives, t_days=3.0,
        no_gat1=ablation.no_gat1, no_gat2=ablation.no_gat2, no_timespan=ablation.no_timespan,
        bpr_on_probability=bpr_on_probability,
    )
    arrays = SampleArrays.from_samples(random_instance(rng, n, n_items, batch))
    negs = np.stack([sample_negatives({int(t)}, n_items, negatives, rng) for t in arrays.targets])

    def loss_fn(p):
        return total_loss(forward_batch(p, arrays, negs, config), p, config)

    analytic = backward(forward_batch(params, arrays, negs, config), params, config)
    numeric = numeric_grads(loss_fn, params, step)
    errs = {name: float(relative_errors(analytic[name], numeric[name]).max()) for name in analytic}
    return GradcheckReport(errs, tolerance, time.perf_counter() - start)
