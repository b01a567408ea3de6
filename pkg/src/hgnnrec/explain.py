"""Hard factor assignments, genre-overlap explanations and assignment exports."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Vocabulary
from .errors import DataError
from .model import ForwardTrace


def hard_assign(S) -> np.ndarray:
    """Most probable factor per node; ties go to the lowest factor index."""
    return np.argmax(np.asarray(S), axis=1)


@dataclass
class FactorSummary:
    index: int
    nodes: list[int]
    members: list[str]
    genres: Counter
    beta: float
    contribution: float  # beta_j * (c_j . v)
    timestamp: float

    def to_dict(self) -> dict:
        return {
            "factor": self.index,
            "nodes": self.nodes,
            "members": self.members,
            "genres": dict(sorted(self.genres.items())),
            "beta": self.beta,
            "contribution": self.contribution,
            "timestamp": self.timestamp,
        }


@dataclass
class Explanation:
    labels: list[int]
    factors: list[FactorSummary]
    predicted_item: str
    predicted_genres: list[str]
    probability: float
    dominant: int
    overlap: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "predicted_item": self.predicted_item,
            "predicted_genres": self.predicted_genres,
            "probability": self.probability,
            "dominant_factor": self.dominant,
            "overlap": self.overlap,
            "factors": [f.to_dict() for f in self.factors],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def explain_prediction(trace: ForwardTrace, vocab: Vocabulary, candidate: int = 0) -> Explanation:
    """Explain the score of ``trace.candidates[candidate]``."""
    if not vocab.has_genres:
        raise DataError("genre metadata missing: supply a genres column (item_id,genres CSV) to explain predictions")
    labels = hard_assign(trace.S)
    items = trace.graph.node_items
    beta = trace.beta[candidate]
    contrib = trace.contributions[candidate]
    factors = []
    for j in range(trace.S.shape[1]):
        nodes = [int(i) for i in np.flatnonzero(labels == j)]
        genres = Counter(g for i in nodes for g in vocab.genres.get(int(items[i]), ()))
        factors.append(
            FactorSummary(j, nodes, [vocab.items[items[i]] for i in nodes], genres,
                          float(beta[j]), float(contrib[j]), float(trace.t_fac[j]))
        )
    dominant = int(np.argmax(beta))
    target = int(trace.candidates[candidate])
    predicted_genres = sorted(vocab.genres.get(target, ()))
    overlap = sorted(set(predicted_genres) & set(factors[dominant].genres))
    return Explanation(
        labels=[int(x) for x in labels],
        factors=factors,
        predicted_item=vocab.items[target],
        predicted_genres=predicted_genres,
        probability=float(trace.yhat[candidate]),
        dominant=dominant,
        overlap=overlap,
    )


def export_assignments(traces: Sequence[ForwardTrace], path: str | Path, vocab: Vocabulary | None = None,
                       sample_ids: Sequence | None = None) -> int:
    """One row per (sample, node): hard label, soft assignment row and refined embedding."""
    if not traces:
        raise DataError("no traces to export")
    k = traces[0].S.shape[1]
    d = traces[0].Z.shape[1]
    ids = list(sample_ids) if sample_ids is not None else list(range(len(traces)))
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "node_index", "item_id", "hard_label"]
                   + [f"S_{j}" for j in range(k)] + [f"z_{j}" for j in range(d)])
        for sid, tr in zip(ids, traces):
            labels = hard_assign(tr.S)
            for i, item in enumerate(tr.graph.node_items):
                key = vocab.items[item] if vocab is not None else int(item)
                w.writerow([sid, i, key, int(labels[i])] + [repr(float(x)) for x in tr.S[i]]
                           + [repr(float(x)) for x in tr.Z[i]])
                rows += 1
    return rows
