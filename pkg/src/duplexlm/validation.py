"""Input coercion helpers in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .units import DialogueSample, read_corpus


def check_dialogues(X: Any, vocab_size: int | None = None, allow_empty: bool = False) -> list[DialogueSample]:
    """Coerce ``X`` into a list of :class:`DialogueSample`.

    Accepts a corpus path, a single sample, an iterable of samples, or an integer
    array of shape ``[N, 2, T]`` (or ``[2, T]`` for one dialogue).
    """
    if isinstance(X, (str, Path)):
        samples = list(read_corpus(X))
    elif isinstance(X, DialogueSample):
        samples = [X]
    elif isinstance(X, np.ndarray):
        arr = X[None] if X.ndim == 2 else X
        if arr.ndim != 3 or arr.shape[1] != 2:
            raise ValueError(f"expected an array of shape [N, 2, T], got {X.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"unit arrays must be integer typed, got {arr.dtype}")
        samples = [DialogueSample.from_arrays(x[0], x[1], id=str(i)) for i, x in enumerate(arr)]
    elif isinstance(X, Iterable):
        samples = []
        for i, x in enumerate(X):
            if isinstance(x, DialogueSample):
                samples.append(x)
            else:
                arr = np.asarray(x)
                if arr.ndim != 2 or arr.shape[0] != 2:
                    raise ValueError(f"item {i}: expected a DialogueSample or [2, T] array")
                samples.append(DialogueSample.from_arrays(arr[0], arr[1], id=str(i)))
    else:
        raise TypeError(f"cannot interpret {type(X).__name__} as dialogues")

    if not samples and not allow_empty:
        raise ValueError("no dialogues given")
    if vocab_size is not None:
        for s in samples:
            s.channel_a.check_vocab(vocab_size)
            s.channel_b.check_vocab(vocab_size)
    return samples


def check_positive(name: str, value, strict: bool = True):
    if value is None or (value <= 0 if strict else value < 0):
        raise ValueError(f"{name} must be {'positive' if strict else 'non-negative'}, got {value!r}")
    return value


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
