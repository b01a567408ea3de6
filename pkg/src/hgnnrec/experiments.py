"""Desk-scale experiments on the synthetic corpora, shared by scripts and tests.

``overfit_run`` trains on the fixed-pattern corpus and tracks train Hit@1.
``recency_run`` trains one model variant on the two-session genre corpus,
holding out the last quarter of users for testing, and reports test Hit@10,
mean assignment entropy and how often the dominant factor explains the
prediction's genre.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import data, evaluation, explain, synthetic, training
from .data import EncodedSample, SampleArrays, Vocabulary
from .model import Hyper, encode, forward

# Variant name -> TrainConfig overrides.
ARMS = {
    "full": {},
    "no_timespan": {"no_timespan": True},
    "no_entropy": {"no_entropy": True},
}


def encode_corpus(interactions, window: int = 12):
    vocab = Vocabulary.from_interactions(interactions)
    splits = data.split(data.build_sequences(interactions, window))
    return vocab, {name: [vocab.encode(s) for s in samples] for name, samples in splits.items()}


# ---------------------------------------------------------------------------
# overfit corpus
# ---------------------------------------------------------------------------


@dataclass
class OverfitResult:
    hit1: list[float]  # train Hit@1 after each epoch
    losses: list[float]
    model_hit10: float
    popularity_hit10: float
    seconds: float

    def epochs_to(self, level: float) -> int | None:
        for epoch, h in enumerate(self.hit1, start=1):
            if h >= level:
                return epoch
        return None


def overfit_run(seed: int = 0, max_epochs: int = 500, batch_size: int = 32, stop_at: float | None = None,
                corpus_seed: int = 0) -> OverfitResult:
    """Train with default hyperparameters on ``pattern_corpus``; all samples are training samples.

    With ``stop_at`` set, training ends at the first epoch whose train Hit@1
    reaches it.
    """
    vocab, splits = encode_corpus(synthetic.pattern_corpus(seed=corpus_seed))
    train = splits["train"]
    config = training.TrainConfig(batch_size=batch_size, max_epochs=max_epochs, seed=seed)
    hit1: list[float] = []

    def on_epoch(epoch, params):
        hit1.append(evaluation.evaluate(params, train, (1,), config.T).hit[0])
        return stop_at is not None and hit1[-1] >= stop_at

    start = time.perf_counter()
    result = training.train(splits, len(vocab), Hyper(), config, on_epoch=on_epoch)
    seconds = time.perf_counter() - start
    model = evaluation.evaluate(result.params, train, (10,), config.T)
    popularity = evaluation.evaluate(evaluation.popularity_baseline(train, len(vocab)), train, (10,))
    return OverfitResult(hit1, [r.train_loss for r in result.log], model.hit[0], popularity.hit[0], seconds)


# ---------------------------------------------------------------------------
# two-session genre corpus
# ---------------------------------------------------------------------------


@dataclass
class RecencyData:
    vocab: Vocabulary
    train: list[EncodedSample]
    test: list[EncodedSample]


def recency_data(seed: int, n_users: int = 400, test_fraction: float = 0.25) -> RecencyData:
    """Each user yields one sample, so the held-out set is a fraction of users."""
    vocab, splits = encode_corpus(synthetic.recency_corpus(n_users=n_users, seed=seed))
    samples = splits["train"]
    n_test = max(1, int(round(len(samples) * test_fraction)))
    return RecencyData(vocab, samples[:-n_test], samples[-n_test:])


@dataclass
class ArmResult:
    arm: str
    seed: int
    hit10: float
    entropy: float
    explained: float  # share of test samples whose dominant factor carries the predicted genre
    seconds: float
    params: training.ModelParams = field(repr=False, default=None)


def mean_entropy(params, samples, config: training.TrainConfig) -> float:
    """Mean row entropy of the soft assignment matrix over the given windows."""
    arrays = SampleArrays.from_samples(samples)
    enc = encode(params, arrays.items, arrays.times, config.T, config.ablation)
    return float(np.mean([training.entropy_loss(S) for S in enc.S]))


def explained_share(params, samples, vocab: Vocabulary, config: training.TrainConfig) -> float:
    """Fraction of samples whose top-ranked item shares a genre with the dominant factor's members."""
    arrays = SampleArrays.from_samples(samples)
    top = evaluation.catalog_scores(params, arrays, config.T, config.ablation).argmax(axis=1)
    hits = 0
    for sample, item in zip(samples, top):
        trace = forward(sample, int(item), sample.target_time, params, config.T, config.ablation)
        hits += bool(explain.explain_prediction(trace, vocab).overlap)
    return hits / len(samples)


def recency_run(seed: int, arm: str = "full", epochs: int = 100, batch_size: int = 32,
                dataset: RecencyData | None = None, **overrides) -> ArmResult:
    ds = dataset if dataset is not None else recency_data(seed)
    config = training.TrainConfig(batch_size=batch_size, max_epochs=epochs, seed=seed, **ARMS[arm])
    if overrides:
        config = replace(config, **overrides)
    start = time.perf_counter()
    result = training.train({"train": ds.train}, len(ds.vocab), Hyper(), config)
    seconds = time.perf_counter() - start
    params = result.params
    hit10 = evaluation.evaluate(params, ds.test, (10,), config.T, config.ablation).hit[0]
    return ArmResult(arm, seed, hit10, mean_entropy(params, ds.test, config),
                     explained_share(params, ds.test, ds.vocab, config), seconds, params)


def entropy_contrast(seed: int, epochs: int = 100, dataset: RecencyData | None = None) -> tuple[float, float]:
    """Mean assignment entropy with the default entropy weight and with weight zero."""
    ds = dataset if dataset is not None else recency_data(seed)
    with_ent = recency_run(seed, "full", epochs, dataset=ds)
    without = recency_run(seed, "full", epochs, dataset=ds, lambda_ent=0.0)
    return with_ent.entropy, without.entropy
