"""Full-catalog ranking metrics (Hit@K, RR@K) and a popularity baseline."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import EncodedSample, SampleArrays
from .errors import DataError
from .model import Ablation, ModelParams, encode, score_candidates

EVAL_CHUNK = 64


def hit_at_k(rank: int, k: int) -> int:
    return int(rank <= k)


def rr_at_k(rank: int, k: int) -> float:
    return 1.0 / rank if rank <= k else 0.0


def rank_from_scores(scores, target: int) -> int:
    """1-based rank of ``target``; items tied with it count as ranked above it."""
    scores = np.asarray(scores)
    return int(np.count_nonzero(scores >= scores[target]))


def catalog_scores(params: ModelParams, arrays: SampleArrays, T: float, ablation: Ablation = Ablation()) -> np.ndarray:
    """Pre-sigmoid scores of every catalog item for each sample at its target time.

    The sigmoid is strictly increasing, so ranks match ranking by probability,
    but raw scores do not saturate into ties.
    """
    enc = encode(params, arrays.items, arrays.times, T, ablation)
    return score_candidates(enc, params, None, arrays.target_times).logit


def rank_targets(params: ModelParams, samples, T: float, ablation: Ablation = Ablation(), pool=None) -> np.ndarray:
    arrays = samples if isinstance(samples, SampleArrays) else SampleArrays.from_samples(samples)

    def run(lo):
        chunk = arrays[lo : lo + EVAL_CHUNK]
        s = catalog_scores(params, chunk, T, ablation)
        target = s[np.arange(len(chunk)), chunk.targets]
        return np.count_nonzero(s >= target[:, None], axis=1)

    starts = range(0, len(arrays), EVAL_CHUNK)
    parts = list(pool.map(run, starts)) if pool is not None else [run(lo) for lo in starts]
    return np.concatenate(parts).astype(np.int64)


def rank_target(params: ModelParams, sample: EncodedSample, T: float, ablation: Ablation = Ablation()) -> int:
    return int(rank_targets(params, [sample], T, ablation)[0])


@dataclass
class EvalReport:
    cutoffs: list[int]
    hit: list[float]
    rr: list[float]
    n: int
    ranks: np.ndarray | None = None

    def to_json(self) -> str:
        return json.dumps({"cutoffs": self.cutoffs, "hit": self.hit, "rr": self.rr, "n": self.n})

    def metric(self, name: str, k: int) -> float:
        return getattr(self, name)[self.cutoffs.index(k)]


def report_from_ranks(ranks, cutoffs: Sequence[int] = (5, 10)) -> EvalReport:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise DataError("cannot evaluate an empty sample set")
    if ranks.min() < 1:
        raise ValueError("ranks are 1-based")
    cutoffs = [int(k) for k in cutoffs]
    if any(k < 1 for k in cutoffs):
        raise ValueError("cutoffs must be >= 1")
    hit = [float(np.mean(ranks <= k)) for k in cutoffs]
    rr = [float(np.mean(np.where(ranks <= k, 1.0 / ranks, 0.0))) for k in cutoffs]
    return EvalReport(cutoffs, hit, rr, int(ranks.size), ranks)


def evaluate(model, samples: Sequence[EncodedSample], cutoffs: Sequence[int] = (5, 10), T: float | None = None,
             ablation: Ablation = Ablation(), pool=None) -> EvalReport:
    """Mean Hit@K and RR@K. ``model`` is ModelParams (needs ``T``) or a ``PopularityRanker``."""
    if len(samples) == 0:
        raise DataError("cannot evaluate an empty sample set")
    if isinstance(model, PopularityRanker):
        ranks = np.array([model.rank(s.target) for s in samples])
    else:
        if T is None:
            raise ValueError("T is required to rank with model parameters")
        ranks = rank_targets(model, samples, T, ablation, pool)
    return report_from_ranks(ranks, cutoffs)


class PopularityRanker:
    """Static order by training-target frequency, ties by item index."""

    def __init__(self, counts: np.ndarray):
        self.counts = counts
        self.order = np.lexsort((np.arange(len(counts)), -counts))
        self.position = np.empty(len(counts), dtype=np.int64)
        self.position[self.order] = np.arange(1, len(counts) + 1)

    def rank(self, item: int) -> int:
        return int(self.position[item])

    def top(self, k: int) -> np.ndarray:
        return self.order[:k]


def popularity_baseline(train_samples: Sequence[EncodedSample], n_items: int) -> PopularityRanker:
    if not train_samples:
        raise DataError("popularity baseline needs training samples")
    freq = Counter(s.target for s in train_samples)
    counts = np.zeros(n_items, dtype=np.int64)
    for item, c in freq.items():
        counts[item] = c
    return PopularityRanker(counts)
