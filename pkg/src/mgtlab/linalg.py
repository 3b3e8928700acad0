"""Forward-only linear algebra for rank-1 identity perturbations.

Covers the Delta operator ``A = I - beta * k k^T``, Householder reflectors,
the delta residual block in its matrix and additive forms, and a
dependency-free Jacobi eigensolver used for singular values.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, NumericalError
from .tensor import Tensor

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
CLAMP_TOL = 1e-10
# columns shorter than this fraction of the longest one are numerically zero
_NEGLIGIBLE_COLUMN = 4.0 * np.finfo(np.float64).eps


@dataclass(frozen=True)
class DeltaSpec:
    """Gate ``beta`` and unit direction ``k`` of one Delta operator.

    ``k`` is normalised here; build instances with :meth:`create`.
    """

    beta: float
    k: np.ndarray
    d: int

    @classmethod
    def create(cls, beta: float, k) -> "DeltaSpec":
        k = np.asarray(k, dtype=np.float64).reshape(-1)
        if k.size < 2:
            raise DimensionError(f"Delta operator needs d >= 2, got d={k.size}")
        norm = float(np.linalg.norm(k))
        if not np.isfinite(norm) or norm < 1e-12:
            raise DegenerateInputError(f"direction vector has norm {norm:.3g}; cannot normalise")
        k = k / norm
        k.setflags(write=False)
        return cls(beta=float(beta), k=k, d=k.size)


@dataclass(frozen=True)
class SingularSpectrum:
    values: np.ndarray
    source_shape: tuple

    def __len__(self):
        return len(self.values)


def delta_matrix(spec: DeltaSpec) -> Tensor:
    """``I - beta k k^T`` as a dense ``d x d`` tensor."""
    k = spec.k
    return Tensor._wrap(np.eye(spec.d) - spec.beta * np.outer(k, k))


def delta_spectrum(spec: DeltaSpec):
    """Closed-form eigenvalues (ascending) and determinant of the Delta operator."""
    eig = np.ones(spec.d)
    eig[0] = 1.0 - spec.beta
    return np.sort(eig), 1.0 - spec.beta


def check_delta_spectrum(spec: DeltaSpec, tol: float = 1e-8) -> tuple[bool, float]:
    """Eigensolve ``delta_matrix(spec)`` numerically and compare with :func:`delta_spectrum`.

    Returns ``(ok, max_error)`` where the error covers every eigenvalue and the determinant.
    """
    predicted, det = delta_spectrum(spec)
    solved = np.sort(jacobi_eigvalsh(delta_matrix(spec).data))
    err = max(float(np.max(np.abs(solved - predicted))), abs(float(np.prod(solved)) - det))
    return err <= tol, err


def householder_matrix(k) -> Tensor:
    k = np.asarray(k.data if isinstance(k, Tensor) else k, dtype=np.float64).reshape(-1)
    nrm2 = float(k @ k)
    if nrm2 == 0.0 or not np.isfinite(nrm2):
        raise DegenerateInputError("Householder direction must be a finite non-zero vector")
    return Tensor._wrap(np.eye(k.size) - 2.0 * np.outer(k, k) / nrm2)


def apply_delta_block(X, spec: DeltaSpec, v, tol: float = 1e-12) -> Tensor:
    """Delta residual block ``A X + beta k v^T`` evaluated two ways.

    ``X`` is ``d x d_v`` (or a length-``d`` vector with scalar ``v``).  The
    matrix form and the erase-and-write form ``X + beta k (v^T - k^T X)``
    must agree to ``tol`` (scaled by the operand magnitude); the additive
    result is returned.
    """
    Xd = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    vd = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    vector_case = Xd.ndim == 1
    if vector_case:
        Xd = Xd[:, None]
        vd = vd.reshape(1)
    if Xd.ndim != 2 or Xd.shape[0] != spec.d:
        raise DimensionError(f"X must be ({spec.d}, d_v) or ({spec.d},), got {Xd.shape}")
    vd = vd.reshape(-1)
    if vd.shape[0] != Xd.shape[1]:
        raise DimensionError(f"v must have length d_v={Xd.shape[1]}, got {vd.shape[0]}")

    k, beta = spec.k, spec.beta
    matrix_form = delta_matrix(spec).data @ Xd + beta * np.outer(k, vd)
    additive = Xd + beta * np.outer(k, vd - k @ Xd)
    scale = max(1.0, float(np.max(np.abs(Xd), initial=0.0)), float(np.max(np.abs(vd), initial=0.0)),
                abs(beta))
    gap = float(np.max(np.abs(matrix_form - additive), initial=0.0))
    if gap > tol * scale:
        raise NumericalError(f"matrix and additive delta forms disagree by {gap:.3e}", residual=gap)
    return Tensor._wrap(additive[:, 0] if vector_case else additive)


def orthogonality_check(beta: float, tol: float = 1e-12) -> bool:
    """True iff the Delta operator with gate ``beta`` is orthogonal (``|1 - beta| = 1``)."""
    return abs(abs(1.0 - float(beta)) - 1.0) <= tol


# -- Jacobi -------------------------------------------------------------------


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple:
    """Disjoint (p, q) index pairs per round; n-1 rounds cover every pair once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _rotation(app, aqq, apq, active):
    # Rutishauser's stable choice of the smaller rotation angle.
    safe = np.where(active, apq, 1.0)
    with np.errstate(over="ignore"):
        # a tiny apq overflows zeta to inf, which correctly gives t = 0
        zeta = (aqq - app) / (2.0 * safe)
        t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
    c = 1.0 / np.sqrt(1.0 + t * t)
    s = c * t
    return np.where(active, c, 1.0), np.where(active, s, 0.0)


def jacobi_eigvalsh(a, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic (round-robin ordered) Jacobi rotations.

    Converged when every off-diagonal entry is below ``tol`` times
    ``max(1, max|diag|)``.  Values are returned in diagonal order, unsorted.
    """
    A = np.array(a, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"jacobi_eigvalsh needs a square matrix, got {A.shape}")
    n = A.shape[0]
    asym = float(np.max(np.abs(A - A.T), initial=0.0))
    if asym > tol * max(1.0, float(np.max(np.abs(A), initial=0.0))):
        raise ContractError(f"jacobi_eigvalsh needs a symmetric matrix (max |A - A^T| = {asym:.3e})")
    if n == 1:
        return A.diagonal().copy()
    A = 0.5 * (A + A.T)
    rounds = _round_robin(n)
    off = np.inf
    for _ in range(max_sweeps):
        thresh = tol * max(1.0, float(np.max(np.abs(np.diag(A)))))
        off = float(np.max(np.abs(A - np.diag(np.diag(A)))))
        if off < thresh:
            return np.diag(A).copy()
        for P, Q in rounds:
            apq = A[P, Q]
            c, s = _rotation(A[P, P], A[Q, Q], apq, np.abs(apq) > 0)
            colp, colq = A[:, P].copy(), A[:, Q]
            A[:, P] = c * colp - s * colq
            A[:, Q] = s * colp + c * colq
            rowp, rowq = A[P, :].copy(), A[Q, :]
            A[P, :] = c[:, None] * rowp - s[:, None] * rowq
            A[Q, :] = s[:, None] * rowp + c[:, None] * rowq
            A[P, Q] = 0.0
            A[Q, P] = 0.0
    raise NumericalError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps "
                         f"(max off-diagonal {off:.3e})", residual=off)


def _one_sided_jacobi(M: np.ndarray, tol: float, max_sweeps: int) -> np.ndarray:
    """Column norms after orthogonalising the columns of ``M`` (..., m, n).

    This is cyclic Jacobi on the Gram matrix ``M^T M`` with rotations
    applied to the columns, so the Gram matrix is never formed and small
    singular values keep their relative accuracy.
    """
    M = M.copy()
    n = M.shape[-1]
    if n == 1:
        return np.sqrt((M * M).sum(axis=-2))
    rounds = _round_robin(n)
    # squared column norms never grow past the Frobenius norm, which rotations keep fixed
    floor = (_NEGLIGIBLE_COLUMN ** 2) * (M * M).sum(axis=(-2, -1))[..., None]
    worst = np.inf
    for _ in range(max_sweeps):
        worst = 0.0
        for P, Q in rounds:
            xp, xq = M[..., :, P], M[..., :, Q]
            alpha = (xp * xp).sum(axis=-2)
            beta = (xq * xq).sum(axis=-2)
            gamma = (xp * xq).sum(axis=-2)
            live = np.minimum(alpha, beta) > floor
            denom = np.sqrt(alpha * beta)
            ratio = np.where(live, np.abs(gamma) / np.where(live, denom, 1.0), 0.0)
            worst = max(worst, float(ratio.max(initial=0.0)))
            active = ratio >= tol
            if not active.any():
                continue
            c, s = _rotation(alpha, beta, gamma, active)
            c, s = c[..., None, :], s[..., None, :]
            M[..., :, P] = c * xp - s * xq
            M[..., :, Q] = s * xp + c * xq
        if worst < tol:
            return np.sqrt((M * M).sum(axis=-2))
    raise NumericalError(f"Jacobi singular values did not converge in {max_sweeps} sweeps "
                         f"(max relative off-diagonal {worst:.3e})", residual=worst)


def singular_values_batch(X, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS) -> np.ndarray:
    """Descending singular values for a stack ``(..., S, D)``; returns ``(..., min(S, D))``."""
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    if X.ndim < 2 or min(X.shape[-2:]) < 1:
        raise DimensionError(f"singular_values needs (..., S, D) with S, D >= 1, got {X.shape}")
    if not np.isfinite(X).all():
        raise NumericalError("singular_values input contains non-finite entries")
    # columns span the smaller side so the implicit Gram matrix is min(S, D) square
    M = X if X.shape[-2] >= X.shape[-1] else np.swapaxes(X, -1, -2)
    sv = _one_sided_jacobi(M, tol, max_sweeps)
    return -np.sort(-sv, axis=-1)


def singular_values(X) -> SingularSpectrum:
    Xd = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    if Xd.ndim != 2:
        raise DimensionError(f"singular_values needs a 2-D matrix, got {Xd.shape}")
    return SingularSpectrum(values=singular_values_batch(Xd), source_shape=Xd.shape)


def gram_eigenvalues(X) -> np.ndarray:
    """Descending eigenvalues of the smaller Gram matrix via two-sided Jacobi.

    Slightly negative values from rounding are clamped to zero; anything
    below ``-CLAMP_TOL * max(1, lambda_max)`` is an error.
    """
    Xd = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    G = Xd.T @ Xd if Xd.shape[0] >= Xd.shape[1] else Xd @ Xd.T
    ev = np.sort(jacobi_eigvalsh(G))[::-1]
    floor = -CLAMP_TOL * max(1.0, float(ev[0]))
    if ev[-1] < floor:
        raise NumericalError(f"Gram matrix has negative eigenvalue {ev[-1]:.3e}", residual=float(ev[-1]))
    return np.clip(ev, 0.0, None)
