"""Interaction logs, sliding-window samples, chronological splits and their files."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    genres: frozenset[str] | None = None

    def __post_init__(self):
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")
        if self.genres is not None and (not self.genres or "" in self.genres):
            raise DataError("genres must be a non-empty set of non-empty labels")


@dataclass(frozen=True)
class SequenceSample:
    user_id: str
    window: tuple[Interaction, ...]
    target_item: str
    target_time: int


@dataclass(frozen=True)
class EncodedSample:
    """A sample with users and items replaced by their vocabulary indices."""

    user: int
    items: tuple[int, ...]
    times: tuple[int, ...]
    target: int
    target_time: int

    @property
    def n(self) -> int:
        return len(self.items)


@dataclass
class Vocabulary:
    items: list[str]
    users: list[str] = field(default_factory=list)
    genres: dict[int, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.item_index = {key: i for i, key in enumerate(self.items)}
        self.user_index = {key: i for i, key in enumerate(self.users)}
        if len(self.item_index) != len(self.items):
            raise DataError("duplicate item keys in vocabulary")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def has_genres(self) -> bool:
        return bool(self.genres)

    @classmethod
    def from_interactions(cls, interactions: Iterable[Interaction]) -> "Vocabulary":
        items: dict[str, None] = {}
        users: dict[str, None] = {}
        genres: dict[str, set[str]] = defaultdict(set)
        for it in interactions:
            items.setdefault(it.item_id)
            users.setdefault(it.user_id)
            if it.genres:
                genres[it.item_id] |= it.genres
        vocab = cls(list(items), list(users))
        vocab.genres = {vocab.item_index[k]: frozenset(g) for k, g in genres.items()}
        return vocab

    def encode(self, sample: SequenceSample) -> EncodedSample:
        try:
            return EncodedSample(
                user=self.user_index.get(sample.user_id, -1),
                items=tuple(self.item_index[it.item_id] for it in sample.window),
                times=tuple(it.timestamp for it in sample.window),
                target=self.item_index[sample.target_item],
                target_time=sample.target_time,
            )
        except KeyError as exc:
            raise DataError(f"item {exc.args[0]!r} not in vocabulary") from None

    def set_genres(self, genres_by_key: Mapping[str, Iterable[str]]) -> None:
        for key, gs in genres_by_key.items():
            if key in self.item_index:
                self.genres[self.item_index[key]] = frozenset(gs)

    def save(self, path: str | Path) -> None:
        payload = {
            "items": self.items,
            "users": self.users,
            "genres": {str(i): sorted(g) for i, g in sorted(self.genres.items())},
        }
        Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        vocab = cls(payload["items"], payload.get("users", []))
        vocab.genres = {int(i): frozenset(g) for i, g in payload.get("genres", {}).items()}
        return vocab


def _parse_genres(text: str, lineno: int) -> frozenset[str] | None:
    text = text.strip()
    if not text:
        return None
    labels = [g.strip() for g in text.split("|")]
    if any(not g for g in labels):
        raise DataError(f"line {lineno}: empty genre label")
    return frozenset(labels)


def parse_interactions(stream: io.IOBase | bytes | str) -> list[Interaction]:
    """Parse a ``user_id,item_id,timestamp[,genres]`` CSV (genres pipe-separated).

    Accepts raw bytes, text, or a binary/text file object.
    """
    if isinstance(stream, bytes):
        text = stream.decode("utf-8")
    elif isinstance(stream, str):
        text = stream
    else:
        raw = stream.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header is None:
        raise DataError("empty interaction file")
    header = [h.strip() for h in header]
    if header[:3] != ["user_id", "item_id", "timestamp"] or len(header) > 4 or (
        len(header) == 4 and header[3] != "genres"
    ):
        raise DataError(f"line 1: expected header user_id,item_id,timestamp[,genres], got {header}")
    width = len(header)
    out = []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != width:
            raise DataError(f"line {lineno}: expected {width} columns, got {len(row)}")
        user, item, ts = (c.strip() for c in row[:3])
        try:
            timestamp = int(ts)
        except ValueError:
            raise DataError(f"line {lineno}: timestamp {ts!r} is not an integer") from None
        if timestamp < 0:
            raise DataError(f"line {lineno}: negative timestamp")
        genres = _parse_genres(row[3], lineno) if width == 4 else None
        out.append(Interaction(user, item, timestamp, genres))
    if not out:
        raise DataError("interaction file has no data rows")
    return out


def build_sequences(interactions: Sequence[Interaction], n: int) -> dict[str, list[SequenceSample]]:
    """Sliding windows of ``n`` events per user, each followed by its next event.

    Users with fewer than ``n + 1`` interactions produce no samples.
    """
    if n < 2:
        raise DataError(f"window length must be >= 2, got {n}")
    by_user: dict[str, list[Interaction]] = defaultdict(list)
    for it in interactions:
        by_user[it.user_id].append(it)
    samples = {}
    for user, events in by_user.items():
        # sorted() is stable, so equal timestamps keep input order
        events = sorted(events, key=lambda e: e.timestamp)
        if len(events) < n + 1:
            continue
        samples[user] = [
            SequenceSample(user, tuple(events[s : s + n]), events[s + n].item_id, events[s + n].timestamp)
            for s in range(len(events) - n)
        ]
    return samples


def _holdout_size(count: int) -> int:
    # last 10%, rounded up, but never the only sample a user has
    if count < 2:
        return 0
    return max(1, -(-count // 10))


def split(samples_by_user: Mapping[str, Sequence]) -> dict[str, list]:
    """Per-user chronological split into train / validation / test."""
    out: dict[str, list] = {"train": [], "validation": [], "test": []}
    for user in samples_by_user:
        seq = list(samples_by_user[user])
        n_test = _holdout_size(len(seq))
        rest = len(seq) - n_test
        n_val = _holdout_size(rest)
        out["train"].extend(seq[: rest - n_val])
        out["validation"].extend(seq[rest - n_val : rest])
        out["test"].extend(seq[rest:])
    return out


def write_interactions(interactions: Iterable[Interaction], path: str | Path) -> int:
    """Write interactions in the CSV layout ``parse_interactions`` reads, with a genres column."""
    count = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id", "timestamp", "genres"])
        for it in interactions:
            w.writerow([it.user_id, it.item_id, it.timestamp, "|".join(sorted(it.genres or ()))])
            count += 1
    return count


def write_samples(samples: Iterable[EncodedSample], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fields = [s.user, *s.items, *s.times, s.target, s.target_time]
            fh.write("\t".join(str(int(f)) for f in fields) + "\n")
            count += 1
    return count


def read_samples(path: str | Path) -> list[EncodedSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                fields = [int(f) for f in line.split("\t")]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer field") from None
            if len(fields) < 7 or (len(fields) - 3) % 2:
                raise DataError(f"{path}:{lineno}: bad field count {len(fields)}")
            n = (len(fields) - 3) // 2
            out.append(
                EncodedSample(
                    user=fields[0],
                    items=tuple(fields[1 : 1 + n]),
                    times=tuple(fields[1 + n : 1 + 2 * n]),
                    target=fields[1 + 2 * n],
                    target_time=fields[2 + 2 * n],
                )
            )
    return out


def read_genre_file(path: str | Path) -> dict[str, frozenset[str]]:
    """Read an ``item_id,genres`` CSV (or a full interaction CSV with a genres column)."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty genre file")
    header = [h.strip() for h in rows[0]]
    if "item_id" not in header or "genres" not in header:
        raise DataError(f"{path}: genre file needs item_id and genres columns")
    ii, gi = header.index("item_id"), header.index("genres")
    out: dict[str, set[str]] = defaultdict(set)
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: line {lineno}: expected {len(header)} columns")
        genres = _parse_genres(row[gi], lineno)
        if genres:
            out[row[ii].strip()] |= genres
    return {k: frozenset(v) for k, v in out.items()}


@dataclass
class SampleArrays:
    """Column view of a list of samples of equal window length."""

    users: np.ndarray
    items: np.ndarray
    times: np.ndarray
    targets: np.ndarray
    target_times: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    def __getitem__(self, idx) -> "SampleArrays":
        return SampleArrays(
            self.users[idx], self.items[idx], self.times[idx], self.targets[idx], self.target_times[idx]
        )

    @classmethod
    def from_samples(cls, samples: Sequence[EncodedSample]) -> "SampleArrays":
        if not samples:
            raise DataError("no samples")
        n = samples[0].n
        if any(s.n != n for s in samples):
            raise DataError("samples have mixed window lengths")
        return cls(
            users=np.array([s.user for s in samples], dtype=np.int64),
            items=np.array([s.items for s in samples], dtype=np.int64),
            times=np.array([s.times for s in samples], dtype=np.int64),
            targets=np.array([s.target for s in samples], dtype=np.int64),
            target_times=np.array([s.target_time for s in samples], dtype=np.int64),
        )


def user_histories(*splits: Iterable[EncodedSample]) -> dict[int, frozenset[int]]:
    """Every item a user touched across the given sample sets (windows and targets)."""
    hist: dict[int, set[int]] = defaultdict(set)
    for samples in splits:
        for s in samples:
            hist[s.user].update(s.items)
            hist[s.user].add(s.target)
    return {u: frozenset(v) for u, v in hist.items()}
