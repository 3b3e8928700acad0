"""Executable property families behind ``mgt-lab verify``.

Each family runs a batch of randomized or fixed checks and reports how many
passed.  Thresholds match the library's documented tolerances.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import NumericalError
from .gradcheck import max_relative_error
from .linalg import (DeltaSpec, apply_delta_block, check_delta_spectrum, delta_matrix, householder_matrix,
                     jacobi_eigvalsh, orthogonality_check)
from .metrics import effective_rank
from .model import ModelConfig, block_params, forward_model, init_params, layer_states, mgt_block_forward


@dataclass
class FamilyResult:
    name: str
    passed: int
    total: int
    seconds: float
    worst: float = 0.0

    @property
    def ok(self) -> bool:
        return self.passed == self.total

    def as_dict(self) -> dict:
        return {"family": self.name, "passed": self.passed, "total": self.total,
                "worst": self.worst, "seconds": round(self.seconds, 3), "ok": self.ok}


def _random_spec(rng, d_max=64, beta_range=(-1.0, 2.5)) -> DeltaSpec:
    d = int(rng.integers(2, d_max + 1))
    return DeltaSpec.create(rng.uniform(*beta_range), rng.normal(size=d))


def spectral_family(n=200, seed=0, tol=1e-8):
    rng = np.random.default_rng(seed)
    errs = [check_delta_spectrum(_random_spec(rng), tol)[1] for _ in range(n)]
    return sum(e <= tol for e in errs), n, max(errs)


def householder_errors(k) -> dict:
    H = householder_matrix(k).data
    eye = np.eye(H.shape[0])
    return {
        "symmetry": float(np.max(np.abs(H - H.T))),
        "orthogonality": float(np.max(np.abs(H.T @ H - eye))),
        "involution": float(np.max(np.abs(H @ H - eye))),
        "determinant": abs(float(np.prod(jacobi_eigvalsh(H))) + 1.0),
    }


def householder_family(n=100, seed=1):
    rng = np.random.default_rng(seed)
    passed, worst = 0, 0.0
    for _ in range(n):
        e = householder_errors(rng.normal(size=int(rng.integers(2, 33))))
        good = max(e["symmetry"], e["orthogonality"], e["involution"]) <= 1e-12 and e["determinant"] <= 1e-8
        passed += good
        worst = max(worst, e["orthogonality"], e["involution"], e["symmetry"])
    return passed, n, worst


def additive_form_family(n=100, seed=2):
    rng = np.random.default_rng(seed)
    passed = 0
    worst = 0.0
    for _ in range(n):
        spec = _random_spec(rng, d_max=16)
        X = rng.normal(size=(spec.d, int(rng.integers(1, 9))))
        v = rng.normal(size=X.shape[1])
        matrix_form = delta_matrix(spec).data @ X + spec.beta * np.outer(spec.k, v)
        try:
            out = apply_delta_block(X, spec, v).data
        except NumericalError:
            continue
        gap = float(np.max(np.abs(out - matrix_form)))
        worst = max(worst, gap)
        passed += gap <= 1e-12
    return passed, n, worst


def tangent_family(n=100, seed=3):
    rng = np.random.default_rng(seed)
    passed, worst = 0, 0.0
    for _ in range(n):
        spec = _random_spec(rng)
        u = rng.normal(size=spec.d)
        u -= spec.k * (spec.k @ u)
        err = float(np.linalg.norm(delta_matrix(spec).data @ u - u))
        worst = max(worst, err)
        passed += err < 1e-12
    return passed, n, worst


def orthogonality_family(seed=4):
    rng = np.random.default_rng(seed)
    cases = [(0.0, True), (2.0, True), (1.0, False), (1.999999, False), (-1.0, False), (0.5, False)]
    passed = 0
    for beta, expected in cases:
        A = delta_matrix(DeltaSpec.create(beta, rng.normal(size=6))).data
        numeric = float(np.max(np.abs(A.T @ A - np.eye(6)))) <= 1e-12
        passed += orthogonality_check(beta) == expected and numeric == expected
    return passed, len(cases), 0.0


def _random_block(kind: str, seed: int, S=3, D=8, heads=2):
    cfg = ModelConfig(depth=1, width=D, heads=heads, vocab=5, seq_len=S, variant="mgt_full", seed=seed)
    params = init_params(cfg)
    rng = np.random.default_rng(seed + 100)
    for name, t in params.items():
        if name.startswith("block"):
            # move off the zero-gate point so every pathway carries gradient
            t.data = t.data + rng.normal(0.0, 0.3, t.shape)
    return cfg, params, block_params(params, cfg, 0, kind)


def block_gradient_errors(kind: str = "attn", seed: int = 0, S=3, D=8, heads=2, h=1e-5) -> dict:
    """Relative error of tape vs central-difference gradients for every block parameter."""
    cfg, params, bp = _random_block(kind, seed, S, D, heads)
    rng = np.random.default_rng(seed + 200)
    X = T.Tensor(rng.normal(size=(S, D)), name="X")
    R = rng.normal(size=(S, D))
    prefix = f"block0.{kind}."
    tensors = [X] + [t for n, t in params.items() if n.startswith(prefix)]

    def loss():
        out, _ = mgt_block_forward(X, bp, "mgt_full")
        return T.tsum(T.mul(out, T.Tensor(R)))

    return max_relative_error(loss, tensors, h)


def gradient_family(tol=1e-4):
    worst = 0.0
    passed = total = 0
    for kind in ("attn", "ffn"):
        errs = block_gradient_errors(kind)
        total += len(errs)
        passed += sum(e < tol for e in errs.values())
        worst = max(worst, max(errs.values()))
    return passed, total, worst


def identity_at_init_gap(depth=16, width=32, seq_len=12, seed=0) -> float:
    cfg = ModelConfig(depth=depth, width=width, heads=4, vocab=11, seq_len=seq_len, variant="mgt_full", seed=seed)
    params = init_params(cfg)
    tokens = np.random.default_rng(seed).integers(0, cfg.vocab, size=(2, seq_len))
    _, traces, x0 = forward_model(tokens, cfg, params, return_embedded=True)
    return max(float(np.max(np.abs(s - x0.data))) for s in layer_states(traces, x0))


def identity_family():
    gaps = [identity_at_init_gap(seed=s) for s in range(3)]
    return sum(g <= 1e-12 for g in gaps), len(gaps), max(gaps)


def effective_rank_family(seed=5):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    u, v = rng.normal(size=6), rng.normal(size=5)
    X = rng.normal(size=(7, 5))
    U, _ = np.linalg.qr(rng.normal(size=(7, 7)))
    W, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    base = effective_rank(X)
    checks = [
        abs(effective_rank(Q) - 1.0) <= 1e-10,
        abs(effective_rank(np.outer(u, v)) - 1.0 / 5) <= 1e-10,
        abs(effective_rank(np.diag([1.0, 1.0, 0.0, 0.0])) - 0.5) <= 1e-10,
        abs(effective_rank(3.7 * X) - base) <= 1e-10,
        abs(effective_rank(U @ X @ W) - base) <= 1e-10,
    ]
    return sum(checks), len(checks), 0.0


FAMILIES = {
    "spectral": spectral_family,
    "householder": householder_family,
    "additive_form": additive_form_family,
    "tangent_complement": tangent_family,
    "orthogonality": orthogonality_family,
    "gradient": gradient_family,
    "identity_at_init": identity_family,
    "effective_rank": effective_rank_family,
}


def run_all(families=None) -> list:
    results = []
    for name in families or FAMILIES:
        start = time.perf_counter()
        passed, total, worst = FAMILIES[name]()
        results.append(FamilyResult(name, int(passed), int(total), time.perf_counter() - start, float(worst)))
    return results
