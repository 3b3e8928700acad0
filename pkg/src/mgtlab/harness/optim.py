"""Adam with bias correction and global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, TrainingAbort


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0          # <= 0 disables clipping


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        return {k: g * factor for k, g in grads.items()}, norm
    return grads, norm


def adam_step(params: dict, grads: dict, state: AdamState, hyper: AdamHyper) -> float:
    """Update ``params`` (name -> Tensor) in place; returns the pre-clip gradient norm.

    Parameters without an entry in ``grads`` receive a zero gradient.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} does not match {name} {params[name].shape}")
        if not np.isfinite(g).all():
            layer = name.split(".")[0] if name.startswith("block") else None
            raise TrainingAbort(f"non-finite gradient for {name}", param=name, layer=layer, step=state.t + 1)
    grads, norm = clip_by_global_norm(grads, hyper.grad_clip)
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - hyper.learning_rate * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return norm
