"""Slow reference implementations used as test oracles."""

from __future__ import annotations

import numpy as np


def brute_force_events(a, b, frame_ms: int = 20, min_silence_ms: float = 200) -> list[tuple]:
    """Frame-by-frame labeler; returns sorted ``(start, end, kind, channel)`` tuples."""
    a = [bool(x) for x in a]
    b = [bool(x) for x in b]
    n = len(a)

    def ipu_labels(x):
        prev_active = [-1] * n
        last = -1
        for t in range(n):
            if x[t]:
                last = t
            prev_active[t] = last
        next_active = [-1] * n
        nxt = -1
        for t in range(n - 1, -1, -1):
            if x[t]:
                nxt = t
            next_active[t] = nxt
        in_ipu = []
        for t in range(n):
            if x[t]:
                in_ipu.append(True)
            else:
                p, q = prev_active[t], next_active[t]
                in_ipu.append(p >= 0 and q >= 0 and (q - p - 1) * frame_ms <= min_silence_ms)
        labels, k = [], -1
        for t in range(n):
            if in_ipu[t] and (t == 0 or not in_ipu[t - 1]):
                k += 1
            labels.append(k if in_ipu[t] else -1)
        return labels

    la, lb = ipu_labels(a), ipu_labels(b)
    events = []

    def spans(labels, ch):
        out = []
        t = 0
        while t < n:
            if labels[t] >= 0:
                s = t
                while t < n and labels[t] == labels[s]:
                    t += 1
                out.append((s, t, "IPU", ch))
            else:
                t += 1
        return out

    ipus = {"A": spans(la, "A"), "B": spans(lb, "B")}
    events += ipus["A"] + ipus["B"]

    frame_kind = [None] * n
    t = 0
    while t < n:
        if a[t] and b[t]:
            s = t
            while t < n and a[t] and b[t]:
                t += 1
            events.append((s, t, "OVERLAP", "BOTH"))
        elif not a[t] and not b[t]:
            s = t
            while t < n and not a[t] and not b[t]:
                t += 1
            e = t
            if s == 0 or e == n:
                continue
            if (la[s - 1] >= 0 and la[s - 1] == la[e]) or (lb[s - 1] >= 0 and lb[s - 1] == lb[e]):
                continue
            if a[s - 1] and a[e]:
                ev = (s, e, "PAUSE", "A")
            elif b[s - 1] and b[e]:
                ev = (s, e, "PAUSE", "B")
            else:
                ev = (s, e, "GAP", "NONE")
            events.append(ev)
            for f in range(s, e):
                frame_kind[f] = (ev[2], ev[3])
        else:
            t += 1

    for ch in ("A", "B"):
        lst = ipus[ch]
        i = 0
        while i < len(lst):
            j = i
            while j + 1 < len(lst):
                between = range(lst[j][1], lst[j + 1][0])
                if len(between) and all(frame_kind[f] == ("PAUSE", ch) for f in between):
                    j += 1
                else:
                    break
            events.append((lst[i][0], lst[j][1], "TURN", ch))
            i = j + 1

    return sorted(events)


def random_dual_track(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Two VAD tracks built from runs of mixed lengths (short blips up to long stretches)."""
    tracks = []
    for _ in range(2):
        runs = []
        total = 0
        state = bool(rng.integers(2))
        while total < n:
            scale = rng.choice([3, 12, 40])
            length = int(rng.geometric(1.0 / scale))
            runs.append((state, length))
            total += length
            state = not state
        tracks.append(np.concatenate([np.full(l, s) for s, l in runs])[:n])
    return tracks[0], tracks[1]


def central_difference_check(model, units, edge_mask, durations, part, n_samples=200, rng=None, h=1e-5, floor=1e-6):
    """Worst relative error between autograd and central differences for ``part`` of the loss.

    ``model`` must be float64. Entries are sampled across every parameter tensor,
    at least one per tensor, ``n_samples`` in total. The error denominator is floored at ``floor``.
    """
    import torch

    from duplexlm.model import loss, make_inputs

    rng = rng or np.random.default_rng(0)
    cfg = model.cfg
    tokens = make_inputs(units, cfg.bos_id)

    def f():
        with torch.no_grad():
            return getattr(loss(model(tokens), units, edge_mask, durations, cfg), part).item()

    model.zero_grad()
    getattr(loss(model(tokens), units, edge_mask, durations, cfg), part).backward()
    params = [p for p in model.parameters()]
    sizes = np.array([p.numel() for p in params])
    picks = [(i, int(rng.integers(sizes[i]))) for i in range(len(params))]
    weights = sizes / sizes.sum()
    for i in rng.choice(len(params), size=max(0, n_samples - len(params)), p=weights):
        picks.append((int(i), int(rng.integers(sizes[i]))))

    worst = 0.0
    for i, j in picks:
        flat = params[i].data.view(-1)
        old = flat[j].item()
        flat[j] = old + h
        up = f()
        flat[j] = old - h
        down = f()
        flat[j] = old
        numeric = (up - down) / (2 * h)
        g = params[i].grad
        analytic = 0.0 if g is None else g.view(-1)[j].item()
        # the floor keeps near-zero gradients from turning rounding noise into relative error
        worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor))
    return worst
