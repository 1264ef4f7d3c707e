"""Training loop, edge-level evaluation metrics and the model ablation driver."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import DlmConfig, DlmOutput, build_model, loss, make_inputs
from .units import DialogueSample, edge_targets
from .validation import check_dialogues

logger = logging.getLogger(__name__)

# Ablation ids 0-5: (architecture, cross attention, edge prediction, duration prediction, delta)
ABLATIONS: dict[int, dict] = {
    0: dict(name="MS-TLM", architecture="ms_tlm", cross=False, ep=False, dp=False, delta=0),
    1: dict(name="DLM-1", architecture="dlm", cross=False, ep=False, dp=False, delta=0),
    2: dict(name="DLM-2", architecture="dlm", cross=True, ep=False, dp=False, delta=0),
    3: dict(name="DLM-3", architecture="dlm", cross=True, ep=True, dp=False, delta=0),
    4: dict(name="DLM-4", architecture="dlm", cross=True, ep=True, dp=True, delta=0),
    5: dict(name="DLM-5", architecture="dlm", cross=True, ep=True, dp=True, delta=1),
}


def ablation_model_config(base: DlmConfig, ablation_id: int) -> DlmConfig:
    """Set the objective/architecture switches of ``base`` to one ablation id."""
    if ablation_id not in ABLATIONS:
        raise ValueError(f"ablation id must be one of {sorted(ABLATIONS)}")
    row = ABLATIONS[ablation_id]
    n_cross = 0
    if row["cross"]:
        n_cross = base.n_cross_layers if base.n_cross_layers > 0 else min(4, base.n_layers)
    return replace(
        base,
        architecture=row["architecture"],
        n_cross_layers=n_cross,
        use_edge_prediction=row["ep"],
        use_duration_prediction=row["dp"],
        delta=row["delta"],
    )


def ablation_flags(cfg: DlmConfig) -> dict:
    """The CA / EP / DP / delta check marks a model config corresponds to."""
    return {
        "CA": cfg.architecture == "dlm" and cfg.n_cross_layers > 0,
        "EP": cfg.use_edge_prediction,
        "DP": cfg.use_duration_prediction,
        "delta": cfg.delta if cfg.use_duration_prediction else None,
    }


@dataclass
class TrainConfig:
    model: DlmConfig = field(default_factory=lambda: DlmConfig(n_layers=4, n_heads=4, embed_dim=64, context_len=257))
    ablation_id: Optional[int] = None
    lr: float = 5e-4
    warmup_frac: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 8
    window_frames: int = 256
    max_steps: int = 2000
    eval_interval: int = 200
    eval_split: str = "valid"
    split_fractions: tuple[float, float, float] = (0.98, 0.01, 0.01)
    stop_at_edge_acc: Optional[float] = None
    seed: int = 0
    log_interval: int = 50

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = DlmConfig.from_dict(self.model)
        if self.ablation_id is not None:
            self.model = ablation_model_config(self.model, self.ablation_id)
        self.betas = tuple(self.betas)
        self.split_fractions = tuple(self.split_fractions)
        if self.max_steps <= 0 or self.batch_size <= 0 or self.window_frames <= 0 or self.eval_interval <= 0:
            raise ValueError("max_steps, batch_size, window_frames and eval_interval must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.window_frames > self.model.max_units:
            raise ValueError(
                f"window_frames {self.window_frames} does not fit context_len {self.model.context_len} "
                "(one slot is taken by BOS)"
            )
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")

    @property
    def batch_frames(self) -> int:
        return self.batch_size * self.window_frames

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_frac * self.max_steps)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["ablation_flags"] = ablation_flags(self.model)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = {k: v for k, v in d.items() if k != "ablation_flags"}
        model = DlmConfig.from_dict(d.pop("model"))
        ablation_id = d.pop("ablation_id", None)
        cfg = cls(model=model, **d)
        cfg.ablation_id = ablation_id  # already applied to the stored model config
        return cfg


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``cfg.lr`` then inverse square-root decay (``step`` is 1-based)."""
    w = cfg.warmup_steps
    if step <= w:
        return cfg.lr * step / w
    return cfg.lr * math.sqrt(w / step)


@dataclass
class EvalReport:
    edge_nll: float
    edge_acc: float
    dur_mae: Optional[float]
    dur_acc: Optional[float]
    step: int
    split: str
    n_edges: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# -- data -------------------------------------------------------------------------


@dataclass
class PreparedDialogue:
    id: str
    units: np.ndarray  # [2, T]
    edge_mask: np.ndarray  # [2, T]
    durations: np.ndarray  # [2, T]

    @property
    def n_frames(self) -> int:
        return self.units.shape[1]


def prepare(samples: Sequence[DialogueSample]) -> list[PreparedDialogue]:
    """Edge targets for whole dialogues, so cropped windows keep true edges and durations."""
    out = []
    for s in samples:
        ta, tb = edge_targets(s.channel_a), edge_targets(s.channel_b)
        out.append(PreparedDialogue(
            s.id,
            s.to_array(),
            np.stack([ta.edge_mask, tb.edge_mask]),
            np.stack([ta.duration_target, tb.duration_target]),
        ))
    return out


def split_dialogues(samples: Sequence[DialogueSample], fractions=(0.98, 0.01, 0.01),
                    seed: int = 0) -> dict[str, list[DialogueSample]]:
    """Deterministic train/valid/test split by dialogue id."""
    ids = sorted({s.id for s in samples})
    if len(ids) != len(samples):
        raise ValueError("dialogue ids must be unique")
    order = np.random.default_rng([seed, 0x5B17]).permutation(len(ids))
    n = len(ids)
    n_valid = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    if n >= 3:
        n_valid = max(n_valid, 1 if fractions[1] > 0 else 0)
        n_test = max(n_test, 1 if fractions[2] > 0 else 0)
    n_valid, n_test = min(n_valid, n), min(n_test, max(0, n - n_valid))
    by_id = {s.id: s for s in samples}
    shuffled = [by_id[ids[i]] for i in order]
    return {
        "valid": shuffled[:n_valid],
        "test": shuffled[n_valid:n_valid + n_test],
        "train": shuffled[n_valid + n_test:],
    }


def sample_batch(data: Sequence[PreparedDialogue], batch_size: int, window: int,
                 rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    window = min(window, min(d.n_frames for d in data))
    units = np.empty((batch_size, 2, window), dtype=np.int64)
    mask = np.empty((batch_size, 2, window), dtype=bool)
    durs = np.empty((batch_size, 2, window), dtype=np.int64)
    for i in range(batch_size):
        d = data[int(rng.integers(len(data)))]
        s = int(rng.integers(d.n_frames - window + 1))
        units[i], mask[i], durs[i] = d.units[:, s:s + window], d.edge_mask[:, s:s + window], d.durations[:, s:s + window]
    return torch.from_numpy(units), torch.from_numpy(mask), torch.from_numpy(durs)


def eval_windows(data: Sequence[PreparedDialogue], window: int):
    """Consecutive non-overlapping windows covering every dialogue (last one may be short)."""
    for d in data:
        for s in range(0, d.n_frames, window):
            e = min(s + window, d.n_frames)
            yield (torch.from_numpy(d.units[None, :, s:e]), torch.from_numpy(d.edge_mask[None, :, s:e]),
                   torch.from_numpy(d.durations[None, :, s:e]))


# -- metrics --------------------------------------------------------------------


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(x.abs() + 0.5)


@dataclass
class MetricSums:
    nll: float = 0.0
    correct: int = 0
    n_edges: int = 0
    abs_err: float = 0.0
    dur_correct: int = 0

    def add(self, other: "MetricSums") -> None:
        self.nll += other.nll
        self.correct += other.correct
        self.n_edges += other.n_edges
        self.abs_err += other.abs_err
        self.dur_correct += other.dur_correct


def batch_metrics(output: DlmOutput, units: torch.Tensor, edge_mask: torch.Tensor,
                  durations: torch.Tensor, cfg: DlmConfig) -> MetricSums:
    """Edge-position sums; shares the loss code path so mean NLL equals ``loss().l_eu`` for EP models."""
    edge_cfg = replace(cfg, use_edge_prediction=True)
    if not bool(edge_mask.any()):
        return MetricSums()
    lb = loss(output, units, edge_mask, durations, edge_cfg)
    T = units.shape[-1]
    pred = output.unit_logits[..., :T, :].argmax(-1)
    m = MetricSums(
        nll=float(lb.l_eu) * lb.edge_count,
        correct=int((pred == units)[edge_mask].sum()),
        n_edges=lb.edge_count,
    )
    if cfg.use_duration_prediction:
        m.abs_err = float(lb.l_ed) * lb.edge_count
        d_hat = output.duration_pred[..., cfg.delta:cfg.delta + T]
        m.dur_correct = int((round_half_away(d_hat) == durations.to(d_hat.dtype))[edge_mask].sum())
    return m


@torch.no_grad()
def evaluate_model(model, data: Sequence[PreparedDialogue], window: Optional[int] = None,
                   step: int = 0, split: str = "valid") -> EvalReport:
    cfg = model.cfg
    window = window or cfg.max_units
    was_training = model.training
    model.eval()
    sums = MetricSums()
    for units, mask, durs in eval_windows(data, window):
        out = model(make_inputs(units, cfg.bos_id))
        sums.add(batch_metrics(out, units, mask, durs, cfg))
    model.train(was_training)
    if sums.n_edges == 0:
        raise ValueError("evaluation data holds no edges")
    n = sums.n_edges
    dp = cfg.use_duration_prediction
    return EvalReport(
        edge_nll=sums.nll / n,
        edge_acc=100.0 * sums.correct / n,
        dur_mae=sums.abs_err / n if dp else None,
        dur_acc=100.0 * sums.dur_correct / n if dp else None,
        step=step,
        split=split,
        n_edges=n,
    )


def evaluate(checkpoint: str | Path | Checkpoint, corpus, split: str = "valid",
             split_fractions=None, seed: Optional[int] = None, window: Optional[int] = None) -> EvalReport:
    """Evaluate a checkpoint on one split of a corpus (``split='all'`` uses every dialogue)."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    model = ckpt.build_model()
    samples = check_dialogues(corpus)
    for s in samples:
        for ch in (s.channel_a, s.channel_b):
            if len(ch) and ch.units.max() >= model.cfg.vocab_size:
                raise ValueError(
                    f"dialogue {s.id!r} has unit {int(ch.units.max())} outside the checkpoint vocabulary "
                    f"({model.cfg.vocab_size})"
                )
    if split != "all":
        tc = ckpt.train_config or {}
        fractions = split_fractions or tuple(tc.get("split_fractions", (0.98, 0.01, 0.01)))
        seed = tc.get("seed", 0) if seed is None else seed
        samples = split_dialogues(samples, fractions, seed)[split]
        if not samples:
            raise ValueError(f"split {split!r} is empty")
    return evaluate_model(model, prepare(samples), window, ckpt.step, split)


# -- training -------------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    reports: list[EvalReport]
    best: Optional[EvalReport]
    run_dir: Optional[Path]
    steps: int


def train(cfg: TrainConfig, corpus, run_dir: str | Path | None = None) -> TrainResult:
    """Train a model on ``corpus`` (path, samples or unit array).

    Evaluates on ``cfg.eval_split`` every ``eval_interval`` steps and at the end. With a
    ``run_dir`` it writes ``config.json``, ``metrics.jsonl`` (one EvalReport per line),
    ``train_log.jsonl`` and the ``best.ckpt`` / ``last.ckpt`` checkpoints.
    """
    samples = check_dialogues(corpus, vocab_size=cfg.model.vocab_size)
    splits = split_dialogues(samples, cfg.split_fractions, cfg.seed)
    if not splits["train"]:
        raise ValueError("training split is empty")
    train_data = prepare(splits["train"])
    eval_data = prepare(splits[cfg.eval_split]) if splits.get(cfg.eval_split) else train_data
    eval_name = cfg.eval_split if splits.get(cfg.eval_split) else "train"
    if min(d.n_frames for d in train_data) < 2:
        raise ValueError("training dialogues must hold at least 2 frames")

    torch.manual_seed(cfg.seed)
    model = build_model(cfg.model)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    rng = np.random.default_rng([cfg.seed, 0xBA7C])

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        metrics_fh = open(run_dir / "metrics.jsonl", "w")
        log_fh = open(run_dir / "train_log.jsonl", "w")
    else:
        metrics_fh = log_fh = None

    reports: list[EvalReport] = []
    best: Optional[EvalReport] = None
    step = 0
    try:
        for step in range(1, cfg.max_steps + 1):
            lr = lr_at(step, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            units, mask, durs = sample_batch(train_data, cfg.batch_size, cfg.window_frames, rng)
            if not mask.any() and (cfg.model.use_edge_prediction or cfg.model.use_duration_prediction):
                continue
            out = model(make_inputs(units, cfg.model.bos_id))
            lb = loss(out, units, mask, durs, cfg.model)
            opt.zero_grad(set_to_none=True)
            lb.total.backward()
            opt.step()

            if log_fh and (step % cfg.log_interval == 0 or step == 1):
                log_fh.write(json.dumps({"step": step, "lr": lr, **lb.as_floats()}) + "\n")

            if step % cfg.eval_interval == 0 or step == cfg.max_steps:
                rep = evaluate_model(model, eval_data, cfg.window_frames, step, eval_name)
                reports.append(rep)
                logger.info("step %d: %s", step, rep)
                if metrics_fh:
                    metrics_fh.write(json.dumps(rep.to_dict()) + "\n")
                    metrics_fh.flush()
                if best is None or rep.edge_nll < best.edge_nll:
                    best = rep
                    if run_dir is not None:
                        save_checkpoint(run_dir / "best.ckpt", model, step, opt, cfg.to_dict())
                if cfg.stop_at_edge_acc is not None and rep.edge_acc > cfg.stop_at_edge_acc:
                    break
    finally:
        if metrics_fh:
            metrics_fh.close()
            log_fh.close()
    if run_dir is not None:
        save_checkpoint(run_dir / "last.ckpt", model, step, opt, cfg.to_dict())
    return TrainResult(model, reports, best, run_dir, step)


def run_ablation(base: TrainConfig, corpus, ids: Sequence[int] = tuple(ABLATIONS),
                 cross_sweep: Sequence[int] = (0, 2, 4, 6), seeds: Sequence[int] = (0,),
                 out_dir: str | Path | None = None, on_run=None) -> list[dict]:
    """Train one model per ablation id and per cross-layer count, for every seed.

    The cross-layer sweep keeps the base objective and varies only ``n_cross_layers``
    (counts above ``n_layers`` are skipped). Returns one row per run with the final
    evaluation of that run. ``on_run(run_dir, cfg, result)`` is called after each run.
    """
    samples = check_dialogues(corpus, vocab_size=base.model.vocab_size)
    runs = []
    for seed in seeds:
        for aid in ids:
            runs.append((f"id{aid}", replace(base, ablation_id=None, seed=seed,
                                             model=ablation_model_config(base.model, aid)), aid, None))
        for n in cross_sweep:
            if n > base.model.n_layers:
                continue
            m = replace(base.model, architecture="dlm", n_cross_layers=n)
            runs.append((f"cross{n}", replace(base, ablation_id=None, seed=seed, model=m), None, n))

    rows = []
    for name, cfg, aid, n in runs:
        rd = None if out_dir is None else Path(out_dir) / f"{name}_seed{cfg.seed}"
        res = train(cfg, samples, rd)
        if on_run is not None:
            on_run(rd, cfg, res)
        final = res.reports[-1]
        row = {
            "run": name,
            "ablation_id": aid,
            "model": ABLATIONS[aid]["name"] if aid is not None else f"DLM cross {n}/{cfg.model.n_layers}",
            "n_cross_layers": cfg.model.n_cross_layers if cfg.model.architecture == "dlm" else None,
            "seed": cfg.seed,
            **ablation_flags(cfg.model),
            **final.to_dict(),
        }
        rows.append(row)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_ablation_table(Path(out_dir) / "ablation.csv", rows)
    return rows


def write_ablation_table(path: Path, rows: list[dict]) -> None:
    import csv

    if not rows:
        return
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
