"""Two-channel discrete unit streams, run-length (edge) codecs and JSONL corpus I/O."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_FRAME_MS = 20


class UnitStream:
    """Dense per-frame unit ids for one channel."""

    __slots__ = ("units", "frame_ms")

    def __init__(self, units: Sequence[int] | np.ndarray, frame_ms: int = DEFAULT_FRAME_MS):
        arr = np.asarray(units, dtype=np.int64)
        if arr.ndim != 1:
            raise ValueError(f"units must be 1-D, got shape {arr.shape}")
        if arr.size and arr.min() < 0:
            raise ValueError("unit ids must be non-negative")
        if frame_ms <= 0:
            raise ValueError(f"frame_ms must be positive, got {frame_ms}")
        arr.setflags(write=False)
        self.units = arr
        self.frame_ms = int(frame_ms)

    def __len__(self) -> int:
        return int(self.units.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, UnitStream):
            return NotImplemented
        return self.frame_ms == other.frame_ms and np.array_equal(self.units, other.units)

    def __repr__(self) -> str:
        return f"UnitStream(len={len(self)}, frame_ms={self.frame_ms})"

    def check_vocab(self, vocab_size: int) -> None:
        if self.units.size and self.units.max() >= vocab_size:
            raise ValueError(f"unit id {int(self.units.max())} >= vocab size {vocab_size}")


@dataclass(frozen=True)
class DialogueSample:
    channel_a: UnitStream
    channel_b: UnitStream
    id: str = ""

    def __post_init__(self):
        if len(self.channel_a) != len(self.channel_b):
            raise ValueError(
                f"dialogue {self.id!r}: channel lengths differ "
                f"({len(self.channel_a)} vs {len(self.channel_b)})"
            )
        if self.channel_a.frame_ms != self.channel_b.frame_ms:
            raise ValueError(f"dialogue {self.id!r}: channel frame rates differ")

    @classmethod
    def from_arrays(cls, a, b, id: str = "", frame_ms: int = DEFAULT_FRAME_MS) -> "DialogueSample":
        return cls(UnitStream(a, frame_ms), UnitStream(b, frame_ms), id)

    @property
    def frame_ms(self) -> int:
        return self.channel_a.frame_ms

    @property
    def n_frames(self) -> int:
        return len(self.channel_a)

    @property
    def duration_s(self) -> float:
        return self.n_frames * self.frame_ms / 1000.0

    def to_array(self) -> np.ndarray:
        """Stack the channels into an int64 array of shape [2, T]."""
        return np.stack([self.channel_a.units, self.channel_b.units])

    def swapped(self) -> "DialogueSample":
        return DialogueSample(self.channel_b, self.channel_a, self.id)

    def crop(self, start: int, stop: int) -> "DialogueSample":
        return DialogueSample.from_arrays(
            self.channel_a.units[start:stop], self.channel_b.units[start:stop], self.id, self.frame_ms
        )

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "frame_ms": self.frame_ms,
            "a": self.channel_a.units.tolist(),
            "b": self.channel_b.units.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DialogueSample":
        missing = {"id", "a", "b"} - rec.keys()
        if missing:
            raise ValueError(f"record missing keys {sorted(missing)}")
        return cls.from_arrays(rec["a"], rec["b"], str(rec["id"]), int(rec.get("frame_ms", DEFAULT_FRAME_MS)))


class Edge(NamedTuple):
    time_index: int
    unit: int
    duration: int


class EdgeSequence:
    """Run-length view of a stream: parallel ``time_index``, ``unit``, ``duration`` arrays.

    Built from an iterable of ``(time_index, unit, duration)`` triples or, without
    per-edge Python objects, through :meth:`from_arrays`.
    """

    __slots__ = ("time_index", "unit", "duration")

    def __init__(self, entries: Iterable[Sequence[int]] = ()):
        arr = np.asarray([tuple(e) for e in entries], dtype=np.int64).reshape(-1, 3)
        self._set(arr[:, 0], arr[:, 1], arr[:, 2])

    def _set(self, time_index, unit, duration) -> None:
        for name, a in (("time_index", time_index), ("unit", unit), ("duration", duration)):
            a = np.array(a, dtype=np.int64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __setattr__(self, name, value):
        raise AttributeError("EdgeSequence is immutable")

    @classmethod
    def from_arrays(cls, time_index, unit, duration) -> "EdgeSequence":
        obj = cls.__new__(cls)
        obj._set(time_index, unit, duration)
        if not obj.time_index.shape == obj.unit.shape == obj.duration.shape or obj.unit.ndim != 1:
            raise ValueError("edge arrays must be 1-D and of equal length")
        return obj

    @property
    def entries(self) -> tuple[Edge, ...]:
        return tuple(Edge(int(t), int(u), int(d)) for t, u, d in zip(self.time_index, self.unit, self.duration))

    def __len__(self) -> int:
        return self.unit.size

    def __iter__(self) -> Iterator[Edge]:
        return iter(self.entries)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return EdgeSequence.from_arrays(self.time_index[i], self.unit[i], self.duration[i])
        return Edge(int(self.time_index[i]), int(self.unit[i]), int(self.duration[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EdgeSequence):
            return NotImplemented
        return (np.array_equal(self.time_index, other.time_index) and np.array_equal(self.unit, other.unit)
                and np.array_equal(self.duration, other.duration))

    def __hash__(self):
        return hash((self.time_index.tobytes(), self.unit.tobytes(), self.duration.tobytes()))

    def __repr__(self) -> str:
        return f"EdgeSequence(n={len(self)}, total_duration={self.total_duration})"

    @property
    def total_duration(self) -> int:
        return int(self.duration.sum())

    def validate(self) -> None:
        bad = np.flatnonzero(self.duration < 1)
        if bad.size:
            raise ValueError(f"edge at {self.time_index[bad[0]]}: duration must be >= 1")
        expected = np.concatenate([[0], np.cumsum(self.duration)[:-1]]) if len(self) else self.time_index
        bad = np.flatnonzero(self.time_index != expected)
        if bad.size:
            i = bad[0]
            raise ValueError(f"edge time_index {self.time_index[i]} != cumulative duration {expected[i]}")
        bad = np.flatnonzero(self.unit[1:] == self.unit[:-1])
        if bad.size:
            i = bad[0] + 1
            raise ValueError(f"consecutive edges share unit {self.unit[i]} at {self.time_index[i]}")


@dataclass(frozen=True)
class EdgeTargets:
    """Per-frame training targets for one channel.

    ``duration_target`` is only meaningful where ``edge_mask`` is set; elsewhere it is 0.
    """

    edge_mask: np.ndarray
    unit_target: np.ndarray
    duration_target: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.edge_mask.sum())


def _as_units(stream: UnitStream | Sequence[int] | np.ndarray) -> np.ndarray:
    if isinstance(stream, UnitStream):
        return stream.units
    return np.asarray(stream, dtype=np.int64)


def run_starts(units: np.ndarray) -> np.ndarray:
    """Indices where a new run begins (index 0 included for non-empty input)."""
    if units.size == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(units[1:] != units[:-1]) + 1
    return np.concatenate([[0], change]).astype(np.int64)


def dedup(stream: UnitStream | Sequence[int] | np.ndarray) -> EdgeSequence:
    """Run-length encode a stream into (time_index, unit, duration) entries."""
    units = _as_units(stream)
    starts = run_starts(units)
    if starts.size == 0:
        return EdgeSequence()
    durations = np.diff(np.append(starts, units.size))
    return EdgeSequence.from_arrays(starts, units[starts], durations)


def redup(edges: EdgeSequence | Iterable[Sequence[int]], total_len: int, frame_ms: int = DEFAULT_FRAME_MS) -> UnitStream:
    """Inverse of :func:`dedup`."""
    if not isinstance(edges, EdgeSequence):
        edges = EdgeSequence(edges)
    durations = edges.duration
    if durations.sum() != total_len:
        raise ValueError(f"sum of durations {int(durations.sum())} != total_len {total_len}")
    if (durations < 1).any():
        raise ValueError("durations must be >= 1")
    return UnitStream(np.repeat(edges.unit, durations), frame_ms)


def edge_targets(stream: UnitStream | Sequence[int] | np.ndarray) -> EdgeTargets:
    """Edge mask, unit targets and run-length targets for a whole stream.

    Frame 0 always counts as an edge.
    """
    units = _as_units(stream)
    if units.size == 0:
        raise ValueError("edge_targets needs a non-empty stream")
    starts = run_starts(units)
    mask = np.zeros(units.size, dtype=bool)
    mask[starts] = True
    durations = np.zeros(units.size, dtype=np.int64)
    durations[starts] = np.diff(np.append(starts, units.size))
    return EdgeTargets(mask, units.copy(), durations)


# -- corpus files ---------------------------------------------------------


def read_corpus(path: str | Path, strict: bool = True) -> list[DialogueSample]:
    """Read a JSONL dialogue corpus.

    With ``strict=False`` malformed lines are skipped with a warning; the number of
    skipped records is stored on the returned list as ``.n_skipped`` via :class:`Corpus`.
    """
    samples = Corpus()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                samples.append(DialogueSample.from_record(json.loads(line)))
            except (ValueError, TypeError, KeyError, json.JSONDecodeError) as exc:
                if strict:
                    raise ValueError(f"{path}:{lineno}: malformed record: {exc}") from exc
                logger.warning("%s:%d: skipping malformed record (%s)", path, lineno, exc)
                samples.n_skipped += 1
    return samples


def write_corpus(path: str | Path, samples: Iterable[DialogueSample]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


class Corpus(list):
    """A list of dialogues that remembers how many malformed records were dropped."""

    n_skipped: int = 0
