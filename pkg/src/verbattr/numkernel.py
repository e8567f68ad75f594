"""Dense numeric helpers shared by every model: activations, losses, Adam,
and a central-difference gradient checker.

Everything runs in float64. Losses are fused with their activation
(log-softmax / log-sigmoid) so that large logits never produce ``log(0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "softmax",
    "log_softmax",
    "sigmoid",
    "log_sigmoid",
    "cross_entropy",
    "cosine",
    "cosine_grad",
    "AdamState",
    "adam_step",
    "grad_check",
]


def _as_float(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)


def softmax(v, axis: int = -1) -> np.ndarray:
    v = _as_float(v)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v, axis: int = -1) -> np.ndarray:
    v = _as_float(v)
    if v.size == 0:
        raise ValueError("log_softmax of an empty vector")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def sigmoid(x):
    """Logistic function, evaluated without overflow for any finite input."""
    x = _as_float(x)
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def log_sigmoid(x):
    x = _as_float(x)
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def cross_entropy(logits, target, *, binary: bool = False) -> float:
    """Negative log-likelihood of ``target`` under ``logits``.

    Categorical: ``target`` is a class index and the loss is
    ``-log softmax(logits)[target]``.  Binary (``binary=True``): ``logits`` is
    a single score and ``target`` is 0 or 1.
    """
    if binary:
        x = float(np.asarray(logits, dtype=np.float64).reshape(-1)[0])
        if target not in (0, 1):
            raise ValueError(f"binary target must be 0 or 1, got {target!r}")
        return float(-(target * log_sigmoid(x) + (1 - target) * log_sigmoid(-x)))
    logits = _as_float(logits).reshape(-1)
    t = int(target)
    if t != target or not 0 <= t < logits.size:
        raise ValueError(f"target {target!r} out of range for {logits.size} classes")
    return float(-log_softmax(logits)[t])


def cosine(u, v) -> float:
    u = _as_float(u)
    v = _as_float(v)
    if u.shape != v.shape:
        raise ValueError(f"cosine of vectors with shapes {u.shape} and {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine undefined for a zero-norm vector")
    c = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, c))


def cosine_grad(u, v) -> np.ndarray:
    """Gradient of ``cosine(u, v)`` with respect to ``v``."""
    u = _as_float(u)
    v = _as_float(v)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine undefined for a zero-norm vector")
    c = np.dot(u, v) / (nu * nv)
    return u / (nu * nv) - c * v / (nv * nv)


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for :func:`adam_step`.

    ``m`` and ``v`` are allocated lazily on the first update, one buffer per
    parameter array.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> tuple[Sequence[np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"parameter shape {p.shape} != gradient shape {g.shape}")
    if not state.m:
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]
    elif len(state.m) != len(params) or any(
        m.shape != p.shape for m, p in zip(state.m, params)
    ):
        raise ValueError("Adam moment shapes do not match parameter shapes")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def grad_check(
    loss_fn: Callable[[], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    h: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    skip: Callable[[int, tuple], bool] | None = None,
) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn()`` must read the current contents of ``params`` and return
    ``(loss, grads)`` with one gradient per parameter.  Entries are perturbed
    in place and restored.  With ``max_entries`` only a seeded random subset
    of each parameter is probed.  ``skip(param_index, entry_index)`` lets a
    caller exclude entries (e.g. near a hinge kink).

    Returns the maximum of ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    _, grads = loss_fn()
    grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for pi, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient {pi} has shape {g.shape}, expected {p.shape}")
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            if skip is not None and skip(pi, idx):
                continue
            old = p[idx]
            p[idx] = old + h
            f_plus = loss_fn()[0]
            p[idx] = old - h
            f_minus = loss_fn()[0]
            p[idx] = old
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = g[idx]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
