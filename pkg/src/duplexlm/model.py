"""Dual-tower dialogue transformer LM and the single-tower multi-stream baseline.

Inputs are token tensors of shape ``[B, 2, L]`` holding unit ids in ``[0, V]`` where
``V`` (== ``cfg.bos_id``) is the begin-of-sequence id. :func:`make_inputs` prepends it to raw
unit windows, so output position ``t`` predicts unit ``t`` of the window from units
``< t`` of *both* channels, and position ``t + 1`` is the first to have consumed unit ``t``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

ARCHITECTURES = ("dlm", "ms_tlm")


@dataclass
class DlmConfig:
    """Architecture and objective switches.

    ``vocab_size`` counts real units only; the model vocabulary has one extra BOS id.
    ``context_len`` bounds the token sequence length (BOS included).
    """

    vocab_size: int = 100
    n_layers: int = 6
    n_heads: int = 8
    embed_dim: int = 512
    context_len: int = 512
    n_cross_layers: int = 4
    use_edge_prediction: bool = True
    use_duration_prediction: bool = True
    delta: int = 1
    architecture: str = "dlm"
    ffn_mult: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")
        if self.vocab_size < 1 or self.n_layers < 1 or self.context_len < 2:
            raise ValueError("vocab_size, n_layers must be >= 1 and context_len >= 2")
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if not 0 <= self.n_cross_layers <= self.n_layers:
            raise ValueError("n_cross_layers must lie in [0, n_layers]")
        if self.delta not in (0, 1):
            raise ValueError(f"delta must be 0 or 1, got {self.delta}")
        if self.use_duration_prediction and not self.use_edge_prediction:
            raise ValueError("duration prediction requires edge prediction")
        if self.architecture == "ms_tlm" and self.use_duration_prediction:
            raise ValueError("the multi-stream baseline has no duration head")

    @property
    def bos_id(self) -> int:
        return self.vocab_size

    @property
    def n_tokens(self) -> int:
        return self.vocab_size + 1

    @property
    def max_units(self) -> int:
        """Longest unit window that fits after the BOS token."""
        return self.context_len - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DlmConfig":
        return cls(**d)


@dataclass
class DlmOutput:
    unit_logits: torch.Tensor  # [B, 2, L, V + 1]
    duration_pred: torch.Tensor  # [B, 2, L]
    cache: Optional[list] = field(default=None, repr=False)


@dataclass
class LossBreakdown:
    l_eu: torch.Tensor
    l_ed: torch.Tensor
    total: torch.Tensor
    edge_count: int

    def as_floats(self) -> dict:
        return {"l_eu": self.l_eu.item(), "l_ed": self.l_ed.item(), "total": self.total.item(),
                "edge_count": self.edge_count}


def make_inputs(units: torch.Tensor, bos_id: int) -> torch.Tensor:
    """Prepend BOS to every channel: ``[B, 2, T] -> [B, 2, T + 1]``."""
    bos = torch.full(units.shape[:-1] + (1,), bos_id, dtype=units.dtype, device=units.device)
    return torch.cat([bos, units], dim=-1)


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        n, l, d = x.shape
        return x.view(n, l, self.n_heads, d // self.n_heads).transpose(1, 2)

    def project_kv(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self._split(self.k(x)), self._split(self.v(x))

    def attend(self, x_q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, q_start: int) -> torch.Tensor:
        """Causal attention; query ``i`` sits at absolute position ``q_start + i``."""
        q = self._split(self.q(x_q))
        n, h, lq, dh = q.shape
        q_pos = torch.arange(q_start, q_start + lq, device=q.device)
        k_pos = torch.arange(k.shape[2], device=q.device)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=k_pos[None, :] <= q_pos[:, None])
        return self.o(out.transpose(1, 2).reshape(n, lq, h * dh))


class Block(nn.Module):
    """Pre-norm layer: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, dim: int, n_heads: int, ffn_mult: int, cross: bool):
        super().__init__()
        self.ln_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, n_heads)
        self.cross = cross
        if cross:
            self.ln_cross_q = nn.LayerNorm(dim)
            self.ln_cross_kv = nn.LayerNorm(dim)
            self.cross_attn = Attention(dim, n_heads)
        self.ln_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim))

    def forward(self, h: torch.Tensor, start: int, cache: Optional[dict]) -> tuple[torch.Tensor, dict]:
        """``h`` is ``[B, towers, L, d]``; towers are folded into the batch for every op."""
        b, towers, l, d = h.shape
        x = h.reshape(b * towers, l, d)
        new_cache = {}

        xn = self.ln_self(x)
        k, v = self.self_attn.project_kv(xn)
        if cache is not None:
            k = torch.cat([cache["self_k"], k], dim=2)
            v = torch.cat([cache["self_v"], v], dim=2)
        new_cache["self_k"], new_cache["self_v"] = k, v
        x = x + self.self_attn.attend(xn, k, v, start)

        if self.cross:
            # keys/values come from each tower's layer input; flip towers to read the other one
            ck, cv = self.cross_attn.project_kv(self.ln_cross_kv(h.reshape(b * towers, l, d)))
            if cache is not None:
                ck = torch.cat([cache["cross_k"], ck], dim=2)
                cv = torch.cat([cache["cross_v"], cv], dim=2)
            new_cache["cross_k"], new_cache["cross_v"] = ck, cv
            ok = ck.view(b, towers, *ck.shape[1:]).flip(1).reshape(ck.shape)
            ov = cv.view(b, towers, *cv.shape[1:]).flip(1).reshape(cv.shape)
            x = x + self.cross_attn.attend(self.ln_cross_q(x), ok, ov, start)

        x = x + self.ffn(self.ln_ffn(x))
        return x.view(b, towers, l, d), new_cache


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.normal_(module.weight, std=0.02)


class _Base(nn.Module):
    cfg: DlmConfig

    def _check_tokens(self, tokens: torch.Tensor, start: int) -> None:
        if tokens.dim() != 3 or tokens.shape[1] != 2:
            raise ValueError(f"expected tokens of shape [B, 2, L], got {tuple(tokens.shape)}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.n_tokens):
            raise ValueError(f"token ids must lie in [0, {self.cfg.n_tokens})")
        if start + tokens.shape[-1] > self.cfg.context_len:
            raise ValueError(
                f"sequence of {start + tokens.shape[-1]} tokens exceeds context_len {self.cfg.context_len}"
            )

    def _positions(self, start: int, length: int, device) -> torch.Tensor:
        return self.pos_emb(torch.arange(start, start + length, device=device))

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


class DialogueLM(_Base):
    """Two weight-shared towers; the top ``n_cross_layers`` layers cross-attend to the other tower."""

    def __init__(self, cfg: DlmConfig):
        super().__init__()
        if cfg.architecture != "dlm":
            raise ValueError("DialogueLM needs architecture='dlm'")
        self.cfg = cfg
        d = cfg.embed_dim
        self.tok_emb = nn.Embedding(cfg.n_tokens, d)
        self.pos_emb = nn.Embedding(cfg.context_len, d)
        first_cross = cfg.n_layers - cfg.n_cross_layers
        self.blocks = nn.ModuleList(
            Block(d, cfg.n_heads, cfg.ffn_mult, cross=i >= first_cross) for i in range(cfg.n_layers)
        )
        self.ln_f = nn.LayerNorm(d)
        self.unit_head = nn.Linear(d, cfg.n_tokens)
        self.dur_head = nn.Linear(d, 1) if cfg.use_duration_prediction else None
        self.apply(_init_weights)

    def forward(self, tokens: torch.Tensor, cache: Optional[list] = None, start: int = 0) -> DlmOutput:
        self._check_tokens(tokens, start)
        h = self.tok_emb(tokens) + self._positions(start, tokens.shape[-1], tokens.device)
        new_cache = []
        for i, block in enumerate(self.blocks):
            h, c = block(h, start, None if cache is None else cache[i])
            new_cache.append(c)
        h = self.ln_f(h)
        logits = self.unit_head(h)
        if self.dur_head is not None:
            dur = self.dur_head(h).squeeze(-1)
        else:
            dur = torch.zeros(h.shape[:-1], dtype=h.dtype, device=h.device)
        return DlmOutput(logits, dur, new_cache)


class MultiStreamLM(_Base):
    """Single tower over summed per-channel embeddings with one output head per channel."""

    def __init__(self, cfg: DlmConfig):
        super().__init__()
        if cfg.architecture != "ms_tlm":
            raise ValueError("MultiStreamLM needs architecture='ms_tlm'")
        self.cfg = cfg
        d = cfg.embed_dim
        self.emb_a = nn.Embedding(cfg.n_tokens, d)
        self.emb_b = nn.Embedding(cfg.n_tokens, d)
        self.pos_emb = nn.Embedding(cfg.context_len, d)
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.ffn_mult, cross=False) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.head_a = nn.Linear(d, cfg.n_tokens)
        self.head_b = nn.Linear(d, cfg.n_tokens)
        self.apply(_init_weights)

    def forward(self, tokens: torch.Tensor, cache: Optional[list] = None, start: int = 0) -> DlmOutput:
        self._check_tokens(tokens, start)
        h = self.emb_a(tokens[:, 0]) + self.emb_b(tokens[:, 1])
        h = (h + self._positions(start, tokens.shape[-1], tokens.device)).unsqueeze(1)
        new_cache = []
        for i, block in enumerate(self.blocks):
            h, c = block(h, start, None if cache is None else cache[i])
            new_cache.append(c)
        h = self.ln_f(h[:, 0])
        logits = torch.stack([self.head_a(h), self.head_b(h)], dim=1)
        dur = torch.zeros(logits.shape[:-1], dtype=h.dtype, device=h.device)
        return DlmOutput(logits, dur, new_cache)


def build_model(cfg: DlmConfig, seed: int | None = None) -> _Base:
    if seed is not None:
        torch.manual_seed(seed)
    return DialogueLM(cfg) if cfg.architecture == "dlm" else MultiStreamLM(cfg)


def cross_attention_param_count(cfg: DlmConfig) -> int:
    """Parameters held by the cross-attention sub-blocks of a two-tower model."""
    d = cfg.embed_dim
    return cfg.n_cross_layers * (4 * (d * d + d) + 2 * 2 * d)


# -- objectives ---------------------------------------------------------------


def loss(output: DlmOutput, units: torch.Tensor, edge_mask: torch.Tensor, durations: torch.Tensor,
         cfg: DlmConfig) -> LossBreakdown:
    """Edge-unit cross-entropy plus delayed L1 duration loss.

    ``units``, ``edge_mask`` and ``durations`` are ``[B, 2, T]``; ``output`` comes from the
    BOS-prefixed inputs (length ``T + 1``). Unit ``t`` is scored at position ``t`` and its
    duration is read at position ``t + delta``. Without edge prediction the cross-entropy
    is averaged over every position instead of edges only.
    """
    T = units.shape[-1]
    if output.unit_logits.shape[-2] < T + cfg.delta:
        raise ValueError("model output is shorter than the targets")
    if edge_mask.shape != units.shape or durations.shape != units.shape:
        raise ValueError("units, edge_mask and durations must share a shape")
    n_edges = int(edge_mask.sum())
    if n_edges == 0 and (cfg.use_edge_prediction or cfg.use_duration_prediction):
        raise ValueError("batch holds no edge positions")

    logp = torch.log_softmax(output.unit_logits[..., :T, :], dim=-1)
    nll = -logp.gather(-1, units.unsqueeze(-1)).squeeze(-1)
    l_eu = nll[edge_mask].mean() if cfg.use_edge_prediction else nll.mean()

    if cfg.use_duration_prediction:
        pred = output.duration_pred[..., cfg.delta:cfg.delta + T]
        l_ed = (durations.to(pred.dtype) - pred).abs()[edge_mask].mean()
    else:
        l_ed = torch.zeros((), dtype=l_eu.dtype, device=l_eu.device)
    return LossBreakdown(l_eu, l_ed, l_eu + l_ed, n_edges)


def grad(model: _Base, units: torch.Tensor, edge_mask: torch.Tensor, durations: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradient of the total loss with respect to every named parameter."""
    model.zero_grad(set_to_none=True)
    out = model(make_inputs(units, model.cfg.bos_id))
    loss(out, units, edge_mask, durations, model.cfg).total.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
