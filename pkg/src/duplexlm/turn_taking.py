"""Turn-taking event extraction (IPUs, pauses, gaps, overlaps, turns) and per-minute statistics.

All interval arithmetic is done on integer frame indices; seconds are derived on output.
Intervals are half-open ``[start_frame, end_frame)``.

Classification rules for a joint-silence interval ``[s, e)`` (no voice on either channel):

* touching the start or end of the recording: boundary silence, not an event;
* lying inside one IPU of either channel (the IPU holds frames ``s - 1`` and ``e``):
  a bridged short silence, not an event;
* otherwise, if some channel is active both at ``s - 1`` and at ``e``: ``PAUSE`` for that
  channel (channel A wins if both qualify);
* otherwise: ``GAP``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .units import DEFAULT_FRAME_MS, DialogueSample, read_corpus

logger = logging.getLogger(__name__)

IPU, PAUSE, GAP, OVERLAP, TURN = "IPU", "PAUSE", "GAP", "OVERLAP", "TURN"
STAT_KINDS = (IPU, PAUSE, GAP, OVERLAP)
EVENT_KINDS = STAT_KINDS + (TURN,)
CHANNELS = ("A", "B")

DEFAULT_HIST_EDGES_MS = tuple(range(0, 10_001, 100))


@dataclass(frozen=True)
class VadTrack:
    active: np.ndarray
    frame_ms: int = DEFAULT_FRAME_MS

    def __post_init__(self):
        object.__setattr__(self, "active", np.asarray(self.active, dtype=bool))
        if self.active.ndim != 1:
            raise ValueError("VAD track must be 1-D")
        if self.frame_ms <= 0:
            raise ValueError(f"frame_ms must be positive, got {self.frame_ms}")

    def __len__(self) -> int:
        return int(self.active.size)

    @property
    def duration_s(self) -> float:
        return len(self) * self.frame_ms / 1000.0

    @classmethod
    def from_units(cls, units, silence_unit: int = 0, frame_ms: int = DEFAULT_FRAME_MS) -> "VadTrack":
        return cls(np.asarray(units) != silence_unit, frame_ms)

    @classmethod
    def from_segments(cls, segments: Iterable[tuple[float, float]], total_s: float,
                      frame_ms: int = DEFAULT_FRAME_MS) -> "VadTrack":
        """Rasterize ``(start_s, end_s)`` speech segments onto the frame grid."""
        n = int(round(total_s * 1000 / frame_ms))
        active = np.zeros(n, dtype=bool)
        for start, end in segments:
            if end < start:
                raise ValueError(f"segment ends before it starts: ({start}, {end})")
            i = max(0, int(round(start * 1000 / frame_ms)))
            j = min(n, int(round(end * 1000 / frame_ms)))
            active[i:j] = True
        return cls(active, frame_ms)


@dataclass(frozen=True, order=True)
class TurnEvent:
    start_frame: int
    end_frame: int
    kind: str
    channel: str
    frame_ms: int = DEFAULT_FRAME_MS

    def __post_init__(self):
        if self.end_frame <= self.start_frame:
            raise ValueError(f"empty event {self}")
        expected = {OVERLAP: ("BOTH",), GAP: ("NONE",)}.get(self.kind, CHANNELS)
        if self.kind not in EVENT_KINDS or self.channel not in expected:
            raise ValueError(f"inconsistent event kind/channel: {self.kind}/{self.channel}")

    @property
    def start_s(self) -> float:
        return self.start_frame * self.frame_ms / 1000.0

    @property
    def end_s(self) -> float:
        return self.end_frame * self.frame_ms / 1000.0

    @property
    def n_frames(self) -> int:
        return self.end_frame - self.start_frame

    @property
    def duration_ms(self) -> int:
        return self.n_frames * self.frame_ms

    @property
    def duration_s(self) -> float:
        return self.duration_ms / 1000.0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "channel": self.channel, "start_s": self.start_s, "end_s": self.end_s}


def true_runs(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start and end (exclusive) indices of the maximal True stretches of ``mask``."""
    m = np.asarray(mask, dtype=np.int8)
    d = np.diff(np.concatenate([[0], m, [0]]))
    return np.flatnonzero(d == 1), np.flatnonzero(d == -1)


def _delimits(n_frames: np.ndarray, frame_ms: int, min_silence_ms: float, strict: bool) -> np.ndarray:
    ms = n_frames * frame_ms
    return ms > min_silence_ms if strict else ms >= min_silence_ms


def extract_ipus(track: VadTrack, min_silence_ms: float = 200, channel: str = "A",
                 strict: bool = True) -> list[TurnEvent]:
    """Inter-pausal units: active stretches with internal silences up to ``min_silence_ms`` bridged.

    With ``strict`` (the default) a silence delimits only when it is *longer* than
    ``min_silence_ms``; at 20 ms frames that means 11 frames or more.
    """
    starts, ends = _ipu_bounds(track, min_silence_ms, strict)
    return [TurnEvent(int(s), int(e), IPU, channel, track.frame_ms) for s, e in zip(starts, ends)]


def _ipu_bounds(track: VadTrack, min_silence_ms: float, strict: bool) -> tuple[np.ndarray, np.ndarray]:
    starts, ends = true_runs(track.active)
    if starts.size <= 1:
        return starts, ends
    keep = _delimits(starts[1:] - ends[:-1], track.frame_ms, min_silence_ms, strict)
    return starts[np.concatenate([[True], keep])], ends[np.concatenate([keep, [True]])]


def _ipu_index(n: int, ipus: Sequence[TurnEvent]) -> np.ndarray:
    """Per-frame index of the covering IPU, -1 outside any IPU."""
    idx = np.full(n + 1, -1, dtype=np.int64)
    for k, ev in enumerate(ipus):
        idx[ev.start_frame:ev.end_frame] = k
    return idx


def _check_pair(track_a: VadTrack, track_b: VadTrack) -> None:
    if len(track_a) != len(track_b):
        raise ValueError(f"VAD tracks differ in length ({len(track_a)} vs {len(track_b)})")
    if track_a.frame_ms != track_b.frame_ms:
        raise ValueError("VAD tracks differ in frame rate")


def classify_events(ipus_a: Sequence[TurnEvent], ipus_b: Sequence[TurnEvent],
                    track_a: VadTrack, track_b: VadTrack) -> list[TurnEvent]:
    """Derive GAP, PAUSE, OVERLAP and TURN events from both channels' IPUs and raw VAD."""
    _check_pair(track_a, track_b)
    n, fm = len(track_a), track_a.frame_ms
    a, b = track_a.active, track_b.active
    events: list[TurnEvent] = []

    for s, e in zip(*true_runs(a & b)):
        events.append(TurnEvent(int(s), int(e), OVERLAP, "BOTH", fm))

    idx_a, idx_b = _ipu_index(n, ipus_a), _ipu_index(n, ipus_b)
    pauses = {"A": set(), "B": set()}
    for s, e in zip(*true_runs(~a & ~b)):
        s, e = int(s), int(e)
        if s == 0 or e == n:
            continue
        if (idx_a[s - 1] >= 0 and idx_a[s - 1] == idx_a[e]) or (idx_b[s - 1] >= 0 and idx_b[s - 1] == idx_b[e]):
            continue
        if a[s - 1] and a[e]:
            events.append(TurnEvent(s, e, PAUSE, "A", fm))
            pauses["A"].add((s, e))
        elif b[s - 1] and b[e]:
            events.append(TurnEvent(s, e, PAUSE, "B", fm))
            pauses["B"].add((s, e))
        else:
            events.append(TurnEvent(s, e, GAP, "NONE", fm))

    for ch, ipus in (("A", ipus_a), ("B", ipus_b)):
        ordered = sorted(ipus)
        i = 0
        while i < len(ordered):
            j = i
            while j + 1 < len(ordered) and (ordered[j].end_frame, ordered[j + 1].start_frame) in pauses[ch]:
                j += 1
            events.append(TurnEvent(ordered[i].start_frame, ordered[j].end_frame, TURN, ch, fm))
            i = j + 1

    events.sort()
    return events


def extract_events(track_a: VadTrack, track_b: VadTrack, min_silence_ms: float = 200,
                   strict: bool = True) -> list[TurnEvent]:
    """All events (IPUs included) for a pair of VAD tracks, sorted by start frame."""
    _check_pair(track_a, track_b)
    ipus_a = extract_ipus(track_a, min_silence_ms, "A", strict)
    ipus_b = extract_ipus(track_b, min_silence_ms, "B", strict)
    events = ipus_a + ipus_b + classify_events(ipus_a, ipus_b, track_a, track_b)
    events.sort()
    return events


# -- statistics -------------------------------------------------------------


@dataclass
class KindStats:
    count: int = 0
    total_ms: int = 0
    hist_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def merge(self, other: "KindStats") -> "KindStats":
        return KindStats(self.count + other.count, self.total_ms + other.total_ms,
                         self.hist_counts + other.hist_counts)


@dataclass
class TurnTakingStats:
    """Event counts, cumulated durations and duration histograms.

    Histograms use ``hist_edges_ms`` bins plus one trailing overflow bin.
    """

    total_duration_s: float
    kinds: dict[str, KindStats]
    hist_edges_ms: tuple[int, ...] = DEFAULT_HIST_EDGES_MS
    n_dialogues: int = 1
    label: str = ""

    @property
    def minutes(self) -> float:
        return self.total_duration_s / 60.0

    def count_per_min(self, kind: str) -> float:
        return self.kinds[kind].count / self.minutes

    def cumulated_s_per_min(self, kind: str) -> float:
        return self.kinds[kind].total_ms / 1000.0 / self.minutes

    def mean_duration_s(self, kind: str) -> float:
        k = self.kinds[kind]
        return k.total_ms / 1000.0 / k.count if k.count else float("nan")

    def merge(self, other: "TurnTakingStats") -> "TurnTakingStats":
        if tuple(self.hist_edges_ms) != tuple(other.hist_edges_ms):
            raise ValueError("cannot merge stats with different histogram bins")
        return TurnTakingStats(
            self.total_duration_s + other.total_duration_s,
            {k: self.kinds[k].merge(other.kinds[k]) for k in STAT_KINDS},
            self.hist_edges_ms,
            self.n_dialogues + other.n_dialogues,
            self.label,
        )

    def table_row(self) -> dict[str, float]:
        """The eight per-minute columns of a comparison report row."""
        row = {f"{k.lower()}_per_min": self.count_per_min(k) for k in STAT_KINDS}
        row.update({f"{k.lower()}_s_per_min": self.cumulated_s_per_min(k) for k in STAT_KINDS})
        return row

    def to_dict(self) -> dict:
        return {
            "schema": "duplexlm.turn_taking_stats/1",
            "label": self.label,
            "total_duration_s": self.total_duration_s,
            "n_dialogues": self.n_dialogues,
            "hist_edges_ms": list(self.hist_edges_ms),
            "kinds": {
                k: {
                    "count": s.count,
                    "total_s": s.total_ms / 1000.0,
                    "count_per_min": self.count_per_min(k),
                    "cumulated_s_per_min": self.cumulated_s_per_min(k),
                    "mean_duration_s": None if s.count == 0 else self.mean_duration_s(k),
                    "hist_counts": s.hist_counts.tolist(),
                }
                for k, s in self.kinds.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TurnTakingStats":
        kinds = {
            k: KindStats(int(v["count"]), int(round(v["total_s"] * 1000)), np.asarray(v["hist_counts"], dtype=np.int64))
            for k, v in d["kinds"].items()
        }
        return cls(float(d["total_duration_s"]), kinds, tuple(d["hist_edges_ms"]),
                   int(d.get("n_dialogues", 1)), d.get("label", ""))


def _histogram(durations_ms: np.ndarray, edges_ms: Sequence[int]) -> np.ndarray:
    edges = np.asarray(edges_ms, dtype=np.int64)
    counts = np.zeros(len(edges), dtype=np.int64)  # len(edges) - 1 bins + overflow
    if durations_ms.size:
        pos = np.searchsorted(edges, durations_ms, side="right") - 1
        pos = np.clip(pos, 0, len(edges) - 1)
        np.add.at(counts, pos, 1)
    return counts


def compute_stats(events: Iterable[TurnEvent], total_duration_s: float,
                  hist_bins: Sequence[float] | None = None, label: str = "") -> TurnTakingStats:
    """Per-kind counts, cumulated durations and histograms for IPU, PAUSE, GAP and OVERLAP.

    ``hist_bins`` are bin edges in seconds (default: 100 ms bins over 0-10 s); durations past
    the last edge land in an overflow bin.
    """
    if total_duration_s <= 0:
        raise ValueError(f"total_duration_s must be positive, got {total_duration_s}")
    edges_ms = DEFAULT_HIST_EDGES_MS if hist_bins is None else tuple(int(round(b * 1000)) for b in hist_bins)
    durs: dict[str, list[int]] = {k: [] for k in STAT_KINDS}
    for ev in events:
        if ev.kind in durs:
            durs[ev.kind].append(ev.duration_ms)
    kinds = {}
    for k, d in durs.items():
        arr = np.asarray(d, dtype=np.int64)
        kinds[k] = KindStats(int(arr.size), int(arr.sum()), _histogram(arr, edges_ms))
    return TurnTakingStats(float(total_duration_s), kinds, edges_ms, 1, label)


def analyze_tracks(track_a: VadTrack, track_b: VadTrack, min_silence_ms: float = 200,
                   hist_bins: Sequence[float] | None = None) -> tuple[list[TurnEvent], TurnTakingStats]:
    events = extract_events(track_a, track_b, min_silence_ms)
    return events, compute_stats(events, track_a.duration_s, hist_bins)


def analyze_dialogue(sample: DialogueSample, silence_unit: int = 0, min_silence_ms: float = 200,
                     hist_bins: Sequence[float] | None = None) -> tuple[list[TurnEvent], TurnTakingStats]:
    ta = VadTrack.from_units(sample.channel_a.units, silence_unit, sample.frame_ms)
    tb = VadTrack.from_units(sample.channel_b.units, silence_unit, sample.frame_ms)
    return analyze_tracks(ta, tb, min_silence_ms, hist_bins)


@dataclass
class CorpusAnalysis:
    stats: TurnTakingStats
    per_dialogue: list[tuple[str, TurnTakingStats]]
    n_skipped: int = 0

    def to_dict(self) -> dict:
        d = self.stats.to_dict()
        d["n_skipped"] = self.n_skipped
        d["per_dialogue"] = [
            {"id": i, "total_duration_s": s.total_duration_s, **s.table_row()} for i, s in self.per_dialogue
        ]
        return d


def analyze_corpus(corpus: str | Path | Sequence[DialogueSample], silence_unit: int = 0,
                   min_silence_ms: float = 200, hist_bins: Sequence[float] | None = None,
                   label: str = "") -> CorpusAnalysis:
    """Aggregate turn-taking statistics over every dialogue of a corpus.

    VAD is derived from the units (``unit != silence_unit``). Malformed records in a corpus
    file are skipped with a warning and counted.
    """
    n_skipped = 0
    if isinstance(corpus, (str, Path)):
        samples = read_corpus(corpus, strict=False)
        n_skipped = samples.n_skipped
    else:
        samples = list(corpus)
    samples = [s for s in samples if s.n_frames > 0]
    if not samples:
        raise ValueError("corpus holds no usable dialogues")

    per_dialogue = []
    total = None
    for s in samples:
        _, st = analyze_dialogue(s, silence_unit, min_silence_ms, hist_bins)
        per_dialogue.append((s.id, st))
        total = st if total is None else total.merge(st)
    total.label = label
    return CorpusAnalysis(total, per_dialogue, n_skipped)


# -- file formats ---------------------------------------------------------------


def read_vad_csv(path: str | Path) -> list[tuple[float, float]]:
    """Read ``start_s,end_s`` rows (a header line is optional)."""
    segments = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() in ("start_s", "start"):
                continue
            segments.append((float(row[0]), float(row[1])))
    return segments


def write_stats_json(path: str | Path, analysis: CorpusAnalysis | TurnTakingStats) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(analysis.to_dict(), fh, indent=2)


def read_stats_json(path: str | Path) -> TurnTakingStats:
    with open(path, encoding="utf-8") as fh:
        return TurnTakingStats.from_dict(json.load(fh))


def write_histogram_csv(path: str | Path, kind: str, stats_by_label: dict[str, TurnTakingStats]) -> None:
    """One row per bin; one count column per model label."""
    labels = list(stats_by_label)
    first = next(iter(stats_by_label.values()))
    edges = list(first.hist_edges_ms)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_start_s", "bin_end_s"] + labels)
        for i in range(len(edges)):
            lo = edges[i] / 1000.0
            hi = edges[i + 1] / 1000.0 if i + 1 < len(edges) else "inf"
            w.writerow([lo, hi] + [int(stats_by_label[l].kinds[kind].hist_counts[i]) for l in labels])
