"""Self-describing checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7     magic b"DUPLXCK1"
    bytes 8..15    uint64 header length H
    bytes 16..16+H UTF-8 JSON header
    rest           tensor payload, float32 little-endian, row-major, packed back to back

The header holds ``format``/``version``, ``model_config``, ``train_config`` (or null),
``step``, a ``tensors`` list of ``{name, shape, offset, nbytes}`` with offsets relative to the
payload start, and ``optimizer`` (Adam hyper-parameters plus per-parameter step counts).
Tensor names are ``model/<param>``, ``optim/exp_avg/<param>`` and ``optim/exp_avg_sq/<param>``.
See ``docs/checkpoint_format.md``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from .model import DlmConfig, build_model

MAGIC = b"DUPLXCK1"
VERSION = 1


@dataclass
class Checkpoint:
    model_config: DlmConfig
    tensors: dict[str, np.ndarray]
    step: int = 0
    train_config: Optional[dict] = None
    optimizer: Optional[dict] = None
    extra: Optional[dict] = None

    def build_model(self):
        model = build_model(self.model_config)
        state = {k[len("model/"):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if k.startswith("model/")}
        model.load_state_dict(state)
        model.eval()
        return model


def save_checkpoint(path: str | Path, model, step: int = 0, optimizer: Optional[torch.optim.Optimizer] = None,
                    train_config: Optional[dict] = None, extra: Optional[dict] = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, t in model.state_dict().items():
        tensors[f"model/{name}"] = t.detach().cpu().to(torch.float32).numpy()

    optim_meta = None
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        params = [p for _, p in model.named_parameters()]
        group = optimizer.param_groups[0]
        optim_meta = {
            "type": type(optimizer).__name__.lower(),
            "lr": float(group["lr"]),
            "betas": list(group.get("betas", (0.9, 0.999))),
            "eps": float(group.get("eps", 1e-8)),
            "weight_decay": float(group.get("weight_decay", 0.0)),
            "steps": {},
        }
        for name, p in zip(names, params):
            st = optimizer.state.get(p)
            if not st:
                continue
            optim_meta["steps"][name] = int(st["step"])
            tensors[f"optim/exp_avg/{name}"] = st["exp_avg"].detach().cpu().to(torch.float32).numpy()
            tensors[f"optim/exp_avg_sq/{name}"] = st["exp_avg_sq"].detach().cpu().to(torch.float32).numpy()

    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)

    header = {
        "format": "duplexlm-checkpoint",
        "version": VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": train_config,
        "step": int(step),
        "tensors": entries,
        "optimizer": optim_meta,
        "extra": extra,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a duplexlm checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header: dict[str, Any] = json.loads(data[16:16 + hlen].decode("utf-8"))
    if header.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = memoryview(data)[16 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).copy()
    return Checkpoint(DlmConfig.from_dict(header["model_config"]), tensors, header["step"],
                      header.get("train_config"), header.get("optimizer"), header.get("extra"))


def restore_optimizer(ckpt: Checkpoint, model, optimizer: torch.optim.Optimizer) -> None:
    """Load Adam moments saved by :func:`save_checkpoint` into ``optimizer``."""
    if not ckpt.optimizer:
        return
    for name, p in model.named_parameters():
        if name not in ckpt.optimizer["steps"]:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(ckpt.optimizer["steps"][name])),
            "exp_avg": torch.from_numpy(ckpt.tensors[f"optim/exp_avg/{name}"].copy()),
            "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"optim/exp_avg_sq/{name}"].copy()),
        }
