"""Step-synchronous two-channel generation with edge sampling and duration overwrite.

For models trained with duration prediction, each channel holds a cursor (current unit,
countdown). While the countdown is positive the channel repeats its unit; when it runs
out a new edge unit is sampled, and its rounded predicted duration decides how many
frames it occupies. With ``delta == 1`` that duration is read one step later, from the
position that has consumed the new unit. Models without a duration head fall back to
plain per-frame sampling.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint
from .model import make_inputs
from .units import DialogueSample, read_corpus, write_corpus

logger = logging.getLogger(__name__)


@dataclass
class GenConfig:
    temperature: float = 1.0
    top_k: int = 0
    max_new_frames: int = 500
    forbid_self_transition: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.max_new_frames < 1:
            raise ValueError(f"max_new_frames must be >= 1, got {self.max_new_frames}")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ChannelCursor:
    current_unit: Optional[int] = None
    countdown: int = 0
    pending: bool = False  # edge placed, duration not yet read (delta == 1)


@dataclass
class Commit:
    start: int
    unit: int
    duration: Optional[int] = None  # None: never read (generation ended first)


@dataclass
class GenerationTrace:
    """Runs committed by the loop, per channel; ``carry`` is the prompt's last run extension."""

    commits: list[list[Commit]] = field(default_factory=lambda: [[], []])
    carry: list[int] = field(default_factory=lambda: [0, 0])


def _round_duration(d: float) -> int:
    r = int(np.sign(d) * np.floor(abs(d) + 0.5))
    return max(1, r)


def _load(model_or_ckpt):
    if isinstance(model_or_ckpt, (str, Path)):
        model_or_ckpt = load_checkpoint(model_or_ckpt)
    if isinstance(model_or_ckpt, Checkpoint):
        return model_or_ckpt.build_model()
    return model_or_ckpt


class _Stepper:
    """Incremental decoding over a sliding window with a per-layer KV cache."""

    def __init__(self, model, frames: np.ndarray):
        self.model = model
        self.cfg = model.cfg
        self.frames = frames  # [B, 2, total] buffer, filled up to self.n
        self.keep = max(1, self.cfg.max_units // 2)

    def prefill(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Encode frames ``[w0, n)``; return logits/durations at every token position."""
        self.w0 = max(0, n - self.keep) if n > self.cfg.max_units - 1 else 0
        self.n = n
        tokens = make_inputs(torch.from_numpy(self.frames[:, :, self.w0:n]), self.cfg.bos_id)
        out = self.model(tokens)
        self.cache = out.cache
        return out.unit_logits.numpy(), out.duration_pred.numpy()

    def step(self) -> tuple[np.ndarray, np.ndarray]:
        """Feed frame ``n`` and return outputs for the position predicting frame ``n + 1``."""
        n = self.n
        pos = n - self.w0 + 1
        if pos >= self.cfg.context_len:
            logits, dur = self.prefill(n + 1)
            return logits[:, :, -1], dur[:, :, -1]
        tok = torch.from_numpy(self.frames[:, :, n:n + 1])
        out = self.model(tok, cache=self.cache, start=pos)
        self.cache = out.cache
        self.n = n + 1
        return out.unit_logits[:, :, -1].numpy(), out.duration_pred[:, :, -1].numpy()


def _sample(logits: np.ndarray, cfg: GenConfig, rng: np.random.Generator, banned: Sequence[int]) -> int:
    z = logits.astype(np.float64) / cfg.temperature
    for u in banned:
        z[u] = -np.inf
    if cfg.top_k and cfg.top_k < np.isfinite(z).sum():
        kth = np.partition(z, -cfg.top_k)[-cfg.top_k]
        z[z < kth] = -np.inf
    z -= z.max()
    p = np.exp(z)
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(c) - 1))


@torch.no_grad()
def generate_batch(model, prompt: np.ndarray, cfg: GenConfig,
                   seeds: Sequence) -> tuple[np.ndarray, list[GenerationTrace]]:
    """Continue one prompt (``[2, P]``) once per seed; returns ``[len(seeds), 2, P + N]`` frames."""
    model = _load(model)
    model.eval()
    mcfg = model.cfg
    B, P, N = len(seeds), prompt.shape[1], cfg.max_new_frames
    if prompt.size and (prompt.min() < 0 or prompt.max() >= mcfg.vocab_size):
        raise ValueError("prompt holds unit ids outside the model vocabulary")
    if P > mcfg.max_units:
        logger.warning("prompt of %d frames exceeds the context (%d); the model sees only its tail",
                       P, mcfg.max_units)
    frames = np.zeros((B, 2, P + N), dtype=np.int64)
    frames[:, :, :P] = prompt
    rngs = [np.random.default_rng(s) for s in seeds]
    traces = [GenerationTrace() for _ in range(B)]
    overwrite = mcfg.use_duration_prediction
    delta = mcfg.delta
    banned_always = [mcfg.bos_id]

    stepper = _Stepper(model, frames)
    all_logits, all_dur = stepper.prefill(P)
    logits, dur = all_logits[:, :, -1], all_dur[:, :, -1]

    cursors = [[ChannelCursor(), ChannelCursor()] for _ in range(B)]
    if P and overwrite:
        for b in range(B):
            for c in range(2):
                units = prompt[c]
                start = P - 1
                while start > 0 and units[start - 1] == units[-1]:
                    start -= 1
                p = min(max(start - stepper.w0 + delta, 0), all_dur.shape[2] - 1)
                remaining = _round_duration(float(all_dur[b, c, p])) - (P - start)
                cur = cursors[b][c]
                cur.current_unit = int(units[-1])
                cur.countdown = max(0, remaining)
                traces[b].carry[c] = cur.countdown
    elif P:
        for b in range(B):
            for c in range(2):
                cursors[b][c].current_unit = int(prompt[c, -1])

    for n in range(P, P + N):
        for b in range(B):
            for c in range(2):
                cur = cursors[b][c]
                if not overwrite:
                    frames[b, c, n] = _sample(logits[b, c], cfg, rngs[b], banned_always)
                    continue
                if cur.pending:
                    d = _round_duration(float(dur[b, c]))
                    traces[b].commits[c][-1].duration = d
                    cur.countdown = d - 1
                    cur.pending = False
                if cur.countdown > 0:
                    frames[b, c, n] = cur.current_unit
                    cur.countdown -= 1
                    continue
                banned = list(banned_always)
                if cfg.forbid_self_transition and cur.current_unit is not None:
                    banned.append(cur.current_unit)
                u = _sample(logits[b, c], cfg, rngs[b], banned)
                frames[b, c, n] = u
                cur.current_unit = u
                commit = Commit(n, u)
                traces[b].commits[c].append(commit)
                if delta == 0:
                    commit.duration = _round_duration(float(dur[b, c]))
                    cur.countdown = commit.duration - 1
                else:
                    cur.pending = True
        if n + 1 < P + N:
            logits, dur = stepper.step()
    return frames, traces


def generate(checkpoint, prompt: DialogueSample, cfg: GenConfig, return_trace: bool = False):
    """Continue ``prompt`` by ``cfg.max_new_frames`` frames; the prompt is kept verbatim."""
    frames, traces = generate_batch(checkpoint, prompt.to_array(), cfg, [[cfg.seed, 0, 0]])
    out = DialogueSample.from_arrays(frames[0, 0], frames[0, 1], f"{prompt.id}-gen", prompt.frame_ms)
    return (out, traces[0]) if return_trace else out


def make_prompts(samples: Sequence[DialogueSample], prompt_frames: int) -> list[DialogueSample]:
    """Leading ``prompt_frames`` of each dialogue (dialogues that are too short are dropped)."""
    return [s.crop(0, prompt_frames) for s in samples if s.n_frames >= prompt_frames]


def batch_generate(checkpoint, prompts, cfg: GenConfig, n_continuations: int,
                   out_path: str | Path | None = None, mapping_path: str | Path | None = None) -> list[DialogueSample]:
    """``n_continuations`` continuations per prompt, each with its own sub-seed.

    Output ids are ``<prompt id>/cont<k>``. The mapping file (JSONL) lists, per output,
    the prompt id, continuation index, seed and prompt length.
    """
    model = _load(checkpoint)
    if isinstance(prompts, (str, Path)):
        prompts = read_corpus(prompts)
    outputs, mapping = [], []
    for i, pr in enumerate(prompts):
        seeds = [[cfg.seed, i, k] for k in range(n_continuations)]
        if not seeds:
            continue
        frames, _ = generate_batch(model, pr.to_array(), cfg, seeds)
        for k in range(n_continuations):
            out_id = f"{pr.id}/cont{k}"
            outputs.append(DialogueSample.from_arrays(frames[k, 0], frames[k, 1], out_id, pr.frame_ms))
            mapping.append({"output_id": out_id, "prompt_id": pr.id, "continuation": k,
                            "seed": seeds[k], "prompt_frames": pr.n_frames})
    if out_path is not None:
        write_corpus(out_path, outputs)
    if mapping_path is not None:
        with open(mapping_path, "w") as fh:
            for m in mapping:
                fh.write(json.dumps(m) + "\n")
    return outputs
