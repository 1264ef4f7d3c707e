"""Synthetic two-channel dialogues from a latent four-state turn-taking process.

The latent state of each frame is one of ``A`` (only A speaks), ``B``, ``BOTH`` and
``NEITHER``. States follow a semi-Markov chain with geometric dwell times. A channel
carries the silence unit exactly while its speaker is inactive; while active it emits
units from a per-speaker bigram chain with geometric run lengths.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .turn_taking import STAT_KINDS, VadTrack, analyze_tracks
from .units import DEFAULT_FRAME_MS, DialogueSample

STATE_A, STATE_B, STATE_BOTH, STATE_NEITHER = range(4)
STATE_NAMES = ("A", "B", "BOTH", "NEITHER")
A_ACTIVE = np.array([True, False, True, False])
B_ACTIVE = np.array([False, True, True, False])

# Rows: from-state, columns: to-state, in STATE_NAMES order.
FISHER_LIKE_TRANSITIONS = (
    (0.0, 0.10, 0.30, 0.60),
    (0.10, 0.0, 0.30, 0.60),
    (0.50, 0.50, 0.0, 0.0),
    (0.50, 0.50, 0.0, 0.0),
)
FISHER_LIKE_DWELL = (100.0, 100.0, 25.0, 30.0)


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 100
    silence_unit: int = 0
    mean_run: float = 3.0
    transitions: tuple[tuple[float, ...], ...] = FISHER_LIKE_TRANSITIONS
    dwell_means: tuple[float, ...] = FISHER_LIKE_DWELL
    bigram_concentration: float = 0.1
    n_speaker_profiles: int = 4
    echo_lag: Optional[int] = None
    seed: int = 0
    frame_ms: int = DEFAULT_FRAME_MS

    def __post_init__(self):
        # Keep the config hashable when built from lists (JSON, CLI).
        object.__setattr__(self, "transitions", tuple(tuple(float(p) for p in row) for row in self.transitions))
        object.__setattr__(self, "dwell_means", tuple(float(d) for d in self.dwell_means))
        self.validate()

    def validate(self) -> None:
        P = np.asarray(self.transitions, dtype=float)
        if P.shape != (4, 4):
            raise ValueError(f"transition matrix must be 4x4, got {P.shape}")
        if (P < 0).any() or not np.allclose(P.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition matrix rows must be non-negative and sum to 1")
        if len(self.dwell_means) != 4 or min(self.dwell_means) < 1:
            raise ValueError("dwell_means must hold 4 values >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if not 0 <= self.silence_unit < self.vocab_size:
            raise ValueError("silence_unit must lie in [0, vocab_size)")
        if self.mean_run < 1:
            raise ValueError("mean_run must be >= 1")
        if self.bigram_concentration <= 0:
            raise ValueError("bigram_concentration must be positive")
        if self.n_speaker_profiles < 1:
            raise ValueError("n_speaker_profiles must be >= 1")
        if self.echo_lag is not None and self.echo_lag < 1:
            raise ValueError("echo_lag must be >= 1 when set")
        if self.frame_ms <= 0:
            raise ValueError("frame_ms must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transitions"] = [list(r) for r in self.transitions]
        d["dwell_means"] = list(self.dwell_means)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


def fisher_like(**overrides) -> SynthConfig:
    """Rates roughly in the range of spontaneous telephone conversation."""
    return replace(SynthConfig(), **overrides)


def echo_config(lag: int = 5, **overrides) -> SynthConfig:
    """Overlap-heavy config where B repeats A's units ``lag`` frames later.

    Most of B's speech then depends on A's recent past, which only a model that reads
    the other channel can exploit.
    """
    base = dict(
        transitions=(
            (0.0, 0.05, 0.85, 0.10),
            (0.05, 0.0, 0.85, 0.10),
            (0.45, 0.45, 0.0, 0.10),
            (0.45, 0.45, 0.10, 0.0),
        ),
        dwell_means=(40.0, 30.0, 80.0, 15.0),
        echo_lag=lag,
    )
    base.update(overrides)
    return SynthConfig(**base)


@dataclass(frozen=True)
class GroundTruthStats:
    count_per_min: dict[str, float]
    cumulated_s_per_min: dict[str, float]
    mean_duration_s: dict[str, float] = field(default_factory=dict)
    n_frames: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# -- latent chain ----------------------------------------------------------------


def _stationary_time_distribution(cfg: SynthConfig) -> np.ndarray:
    P = np.asarray(cfg.transitions)
    w, v = np.linalg.eig(P.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1))])
    pi = np.abs(pi) / np.abs(pi).sum()
    pt = pi * np.asarray(cfg.dwell_means)
    return pt / pt.sum()


def simulate_states(cfg: SynthConfig, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Per-frame latent states (int8) of the semi-Markov turn-taking chain."""
    if n_frames <= 0:
        raise ValueError(f"n_frames must be positive, got {n_frames}")
    P = np.cumsum(np.asarray(cfg.transitions), axis=1)
    P[:, -1] = 1.0
    dwell_p = 1.0 / np.asarray(cfg.dwell_means)
    out = np.empty(n_frames, dtype=np.int8)

    state = int(rng.choice(4, p=_stationary_time_distribution(cfg)))
    t = 0
    batch = 4096
    while t < n_frames:
        u = rng.random(batch)
        geo = rng.geometric(dwell_p[:, None], size=(4, batch))
        for k in range(batch):
            d = int(geo[state, k])
            out[t:t + d] = state
            t += d
            if t >= n_frames:
                break
            state = int(np.searchsorted(P[state], u[k], side="right"))
    return out


class _SpeakerProfiles:
    """Bigram transition tables over speech units, one per speaker profile."""

    def __init__(self, cfg: SynthConfig):
        rng = np.random.default_rng([cfg.seed, 0x5EED])
        self.speech_units = np.array([u for u in range(cfg.vocab_size) if u != cfg.silence_unit])
        n = self.speech_units.size
        tables = []
        for _ in range(cfg.n_speaker_profiles):
            if n == 1:
                tables.append(np.ones((1, 1)))
                continue
            T = rng.dirichlet(np.full(n - 1, cfg.bigram_concentration), size=n)
            full = np.zeros((n, n))
            for i in range(n):
                full[i, np.arange(n) != i] = T[i]
            tables.append(np.cumsum(full, axis=1))
        self.cum_tables = tables

    def carrier(self, profile: int, n_frames: int, mean_run: float, rng: np.random.Generator) -> np.ndarray:
        """A speech-only unit stream covering ``n_frames`` (later masked by silence)."""
        cum = self.cum_tables[profile]
        n = self.speech_units.size
        out = np.empty(n_frames, dtype=np.int64)
        state = int(rng.integers(n))
        t = 0
        p_run = 1.0 / mean_run
        while t < n_frames:
            m = max(16, int((n_frames - t) / mean_run) + 16)
            runs = rng.geometric(p_run, size=m)
            u = rng.random(m)
            for k in range(m):
                d = int(runs[k])
                out[t:t + d] = state
                t += d
                if t >= n_frames:
                    break
                if n > 1:
                    state = min(int(np.searchsorted(cum[state], u[k], side="right")), n - 1)
        return self.speech_units[out]


@functools.lru_cache(maxsize=16)
def _profiles(cfg: SynthConfig) -> _SpeakerProfiles:
    return _SpeakerProfiles(cfg)


def synth_dialogue(cfg: SynthConfig, length_frames: int, index: int = 0, id: str | None = None,
                   return_states: bool = False):
    """Generate one dialogue; deterministic in ``(cfg, index, length_frames)``."""
    if length_frames <= 0:
        raise ValueError(f"length_frames must be positive, got {length_frames}")
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 1, index])
    states = simulate_states(cfg, length_frames, rng)
    profiles = _profiles(cfg)
    if cfg.n_speaker_profiles >= 2:
        pa, pb = (int(x) for x in rng.choice(cfg.n_speaker_profiles, size=2, replace=False))
    else:
        pa = pb = 0
    a = profiles.carrier(pa, length_frames, cfg.mean_run, rng)
    b = profiles.carrier(pb, length_frames, cfg.mean_run, rng)
    a_on, b_on = A_ACTIVE[states], B_ACTIVE[states]
    a[~a_on] = cfg.silence_unit
    if cfg.echo_lag is not None:
        lag = cfg.echo_lag
        src = np.full(length_frames, cfg.silence_unit, dtype=np.int64)
        if lag < length_frames:
            src[lag:] = a[:-lag]
        copy = b_on & (src != cfg.silence_unit)
        b[copy] = src[copy]
    b[~b_on] = cfg.silence_unit
    sample = DialogueSample.from_arrays(a, b, id if id is not None else f"synth-{index:05d}", cfg.frame_ms)
    return (sample, states) if return_states else sample


def synth_corpus(cfg: SynthConfig, n_dialogues: int, length_frames: int, start_index: int = 0) -> list[DialogueSample]:
    return [synth_dialogue(cfg, length_frames, index=start_index + i) for i in range(n_dialogues)]


@functools.lru_cache(maxsize=8)
def expected_stats(cfg: SynthConfig, n_frames: int = 10_000_000) -> GroundTruthStats:
    """Event rates of the latent chain alone, estimated by Monte-Carlo over ``n_frames``."""
    rng = np.random.default_rng([cfg.seed, 2])
    states = simulate_states(cfg, n_frames, rng)
    ta = VadTrack(A_ACTIVE[states], cfg.frame_ms)
    tb = VadTrack(B_ACTIVE[states], cfg.frame_ms)
    del states
    _, st = analyze_tracks(ta, tb)
    return GroundTruthStats(
        {k: st.count_per_min(k) for k in STAT_KINDS},
        {k: st.cumulated_s_per_min(k) for k in STAT_KINDS},
        {k: st.mean_duration_s(k) for k in STAT_KINDS},
        n_frames,
    )
