"""Central finite differences for checking tape gradients."""

from __future__ import annotations

import numpy as np

from . import tensor as T


def numerical_gradient(loss_fn, tensors, h: float = 1e-5) -> list:
    """Central-difference gradient of the scalar ``loss_fn()`` w.r.t. each tensor.

    Each entry is perturbed and the original data restored; ``loss_fn`` must read
    the tensors' current data and return a float (or scalar Tensor).
    """
    out = []
    for t in tensors:
        base = np.array(t.data, dtype=np.float64)
        g = np.zeros(base.size)
        for i in range(base.size):
            bumped = base.reshape(-1).copy()
            bumped[i] += h
            t.data = bumped.reshape(base.shape)
            up = _value(loss_fn())
            bumped[i] -= 2.0 * h
            t.data = bumped.reshape(base.shape)
            down = _value(loss_fn())
            g[i] = (up - down) / (2.0 * h)
        t.data = base
        g = g.reshape(base.shape)
        out.append(g)
    return out


def _value(x) -> float:
    return x.item() if isinstance(x, T.Tensor) else float(x)


def tape_gradient(loss_fn, tensors) -> list:
    """Reverse-mode gradients of ``loss_fn()`` for each tensor (zeros if unreached)."""
    for t in tensors:
        t.requires_grad = True
    with T.GradTape():
        loss = loss_fn()
    grads = T.backward(loss)
    return [grads.get(t, np.zeros_like(t.data)) for t in tensors]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """``max|a - n| / max(max|a|, max|n|)``, scale-free per tensor."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def max_relative_error(loss_fn, tensors, h: float = 1e-5) -> dict:
    analytic = tape_gradient(loss_fn, tensors)
    numeric = numerical_gradient(loss_fn, tensors, h)
    return {getattr(t, "name", None) or f"arg{i}": relative_error(a, n)
            for i, (t, a, n) in enumerate(zip(tensors, analytic, numeric))}
