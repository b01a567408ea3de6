"""Synthetic interaction logs with known structure, for tests and experiments."""

from __future__ import annotations

import numpy as np

from .data import Interaction
from .tsg import DAY

HOUR = 3600


def pattern_corpus(
    n_users: int = 50,
    n_context: int = 20,
    n_patterns: int = 20,
    window: int = 12,
    seed: int = 0,
) -> list[Interaction]:
    """Each user replays one fixed context sequence, one event a day, then its pattern's target.

    Pattern ``p`` is a random ``window``-subset of the context items ``c*``
    in a fixed order, followed by target ``t{p}``. User ``u`` follows
    pattern ``u % n_patterns``, so the next item is a deterministic function
    of the window and every user contributes exactly one sample. Targets
    never appear inside a window. The catalog has ``n_context + n_patterns``
    items.
    """
    if window > n_context:
        raise ValueError("window cannot exceed the number of context items")
    rng = np.random.default_rng(seed)
    patterns = [rng.choice(n_context, size=window, replace=False) for _ in range(n_patterns)]
    out = []
    for u in range(n_users):
        p = u % n_patterns
        t0 = 1_500_000_000 + int(rng.integers(365)) * DAY
        for step, c in enumerate(patterns[p]):
            out.append(Interaction(f"u{u}", f"c{int(c)}", t0 + step * DAY))
        out.append(Interaction(f"u{u}", f"t{p}", t0 + window * DAY))
    return out


def recency_corpus(
    n_users: int = 300,
    n_genres: int = 6,
    context_size: int = 6,
    followups: int = 10,
    gap_days: float = 20.0,
    seed: int = 0,
) -> list[Interaction]:
    """One two-session episode per user; the next item follows the more recent session.

    Genre ``G{g}`` owns ``context_size`` context items and ``followups``
    follow-up items. A user consumes the full context set of one genre in
    shuffled order, waits ``gap_days``, consumes the context set of a second
    genre, and then picks a random follow-up of that second genre. Both
    session orders give the same window item set, so only timestamps reveal
    which genre is current. Each user yields exactly one sample when the window
    is ``2 * context_size`` long.
    """
    if n_genres < 2:
        raise ValueError("need at least two genres")
    rng = np.random.default_rng(seed)
    block = context_size + followups

    def context(g):
        return g * block + rng.permutation(context_size)

    out = []
    for u in range(n_users):
        first, second = (int(g) for g in rng.choice(n_genres, size=2, replace=False))
        t = 1_500_000_000 + int(rng.integers(365)) * DAY
        for s, g in enumerate((first, second)):
            if s:
                t += int(gap_days * DAY)
            for item in context(g):
                out.append(Interaction(f"u{u}", f"i{int(item)}", t, frozenset({f"G{g}"})))
                t += int(rng.integers(1 * HOUR, 4 * HOUR))
        target = second * block + context_size + int(rng.integers(followups))
        out.append(Interaction(f"u{u}", f"i{target}", t, frozenset({f"G{second}"})))
    return out
