"""Timespan-aware sequence graphs.

Nodes are window positions (a repeated item occupies two nodes). An undirected
edge joins two positions whose timespan is at most ``T``; consecutive
positions are always joined and every node carries a unit self-loop.
Edge weights are ``min(1, mu / |t_j - t_i|)``. Times are in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DAY = 86400


@dataclass(frozen=True)
class TimespanGraph:
    node_items: np.ndarray
    node_times: np.ndarray
    adjacency: np.ndarray
    T: float
    mu: float

    @property
    def n(self) -> int:
        return len(self.node_items)

    def to_csv(self) -> str:
        return "\n".join(",".join(repr(float(w)) for w in row) for row in self.adjacency) + "\n"


def edge_weight(t_i: float, t_j: float, mu: float) -> float:
    if mu <= 0:
        raise ConfigError(f"timespan unit mu must be positive, got {mu}")
    span = abs(t_j - t_i)
    if span <= mu:
        return 1.0
    return mu / span


def adjacency(times: np.ndarray, T: float, mu: float) -> tuple[np.ndarray, np.ndarray]:
    """Weighted adjacency and edge mask for a stack of windows.

    ``times`` has shape (..., N); returns arrays of shape (..., N, N).
    """
    if mu <= 0 or T <= 0:
        raise ConfigError(f"T and mu must be positive, got T={T}, mu={mu}")
    times = np.asarray(times, dtype=np.int64)
    span = np.abs(times[..., :, None] - times[..., None, :]).astype(np.float64)
    n = times.shape[-1]
    idx = np.arange(n)
    near = np.abs(idx[:, None] - idx[None, :]) <= 1  # diagonal and consecutive positions
    mask = (span <= T) | near
    with np.errstate(divide="ignore"):
        weight = np.where(span <= mu, 1.0, mu / np.maximum(span, mu))
    A = np.where(mask, weight, 0.0)
    A[..., idx, idx] = 1.0
    return A, mask


def build_graph(items, times, T: float, mu: float) -> TimespanGraph:
    items = np.asarray(items, dtype=np.int64)
    times = np.asarray(times, dtype=np.int64)
    if items.shape != times.shape or items.ndim != 1:
        raise ValueError("items and times must be equal-length 1-D sequences")
    A, _ = adjacency(times, T, mu)
    return TimespanGraph(items, times, A, float(T), float(mu))
