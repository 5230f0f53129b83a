"""Independent reference computations used by tests and `selfcheck`.

Everything here is written as explicit loops over plain Python floats so
that it shares no code path with the vectorised implementations.
"""

from __future__ import annotations

import math
import random

import numpy as np
import torch


def attention_loops(Q, K, V) -> np.ndarray:
    Q, K, V = (np.asarray(a, dtype=np.float64).tolist() for a in (Q, K, V))
    n, m, d = len(Q), len(K), len(Q[0])
    dv = len(V[0])
    out = []
    for i in range(n):
        logits = [sum(Q[i][c] * K[j][c] for c in range(d)) / math.sqrt(d) for j in range(m)]
        top = max(logits)
        ws = [math.exp(v - top) for v in logits]
        total = sum(ws)
        out.append([sum(ws[j] / total * V[j][c] for j in range(m)) for c in range(dv)])
    return np.array(out)


def masked_mse_loops(eps, eps_hat, mask) -> float:
    """eps, eps_hat: B x C x h x w; mask: B x 1 x h x w."""
    e, eh, m = (np.asarray(a, dtype=np.float64) for a in (eps, eps_hat, mask))
    total, count = 0.0, 0.0
    b, c, h, w = e.shape
    for bi in range(b):
        for ci in range(c):
            for y in range(h):
                for x in range(w):
                    mv = m[bi, 0, y, x]
                    total += ((e[bi, ci, y, x] - eh[bi, ci, y, x]) * mv) ** 2
                    count += mv
    return 0.0 if count == 0 else total / count


def mean_square_loops(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel().tolist()
    b = np.asarray(b, dtype=np.float64).ravel().tolist()
    return sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)


def blend_loops(m, eps_s, eps_r) -> np.ndarray:
    """m: B x 1 x h x w broadcast over channels."""
    m, es, er = (np.asarray(a, dtype=np.float64) for a in (m, eps_s, eps_r))
    out = np.empty_like(es)
    b, c, h, w = es.shape
    for bi in range(b):
        for ci in range(c):
            for y in range(h):
                for x in range(w):
                    mv = m[bi, 0, y, x]
                    out[bi, ci, y, x] = mv * es[bi, ci, y, x] + (1 - mv) * er[bi, ci, y, x]
    return out


def ssim_loops(x, y, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    half = (size - 1) / 2
    g = [math.exp(-((i - half) ** 2) / (2 * sigma ** 2)) for i in range(size)]
    wsum = sum(gi * gj for gi in g for gj in g)
    w = [[g[i] * g[j] / wsum for j in range(size)] for i in range(size)]
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    h, wd, ch = x.shape
    for c in range(ch):
        for i in range(h - size + 1):
            for j in range(wd - size + 1):
                mx = sum(w[a][b] * x[i + a, j + b, c] for a in range(size) for b in range(size))
                my = sum(w[a][b] * y[i + a, j + b, c] for a in range(size) for b in range(size))
                vx = sum(w[a][b] * (x[i + a, j + b, c] - mx) ** 2 for a in range(size) for b in range(size))
                vy = sum(w[a][b] * (y[i + a, j + b, c] - my) ** 2 for a in range(size) for b in range(size))
                cxy = sum(w[a][b] * (x[i + a, j + b, c] - mx) * (y[i + a, j + b, c] - my)
                          for a in range(size) for b in range(size))
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def finite_difference_check(loss_fn, params: list[torch.Tensor], n_checks: int = 200, step: float = 1e-4,
                            seed: int = 0, floor: float = 1e-6) -> dict:
    """Compare autograd gradients with central differences on random scalar entries.

    `loss_fn()` must rebuild the loss from the current parameter values.
    Relative error is |a - n| / max(|a|, |n|, floor). The floor sits well above
    the central-difference round-off (~1e-12 in float64 at step 1e-4), so
    entries whose true gradient is zero do not register as failures.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = random.Random(seed)
    picks = [rng.randrange(total) for _ in range(n_checks)]
    worst = 0.0
    records = []
    with torch.no_grad():
        for flat in picks:
            k = 0
            while flat >= sizes[k]:
                flat -= sizes[k]
                k += 1
            p = params[k].view(-1)
            orig = p[flat].item()
            p[flat] = orig + step
            up = loss_fn().item()
            p[flat] = orig - step
            down = loss_fn().item()
            p[flat] = orig
            num = (up - down) / (2 * step)
            ana = grads[k].view(-1)[flat].item()
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, rel)
            records.append((k, flat, ana, num, rel))
    return {"max_rel_err": worst, "checks": records}
