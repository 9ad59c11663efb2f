"""
Numerics

Dense tensor primitives every other module builds on: a one-sided Jacobi
SVD, magnitude top-k selection and seeded counter-based random streams.

Tensors are plain float64 numpy arrays in C (row-major) order.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core.errors import BudgetError, DimensionalityError, NumericInputError
from .core.provenance import stable_int

logger = logging.getLogger(__name__)

Tensor = NDArray[np.float64]

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD: W = U @ diag(S) @ Vt with p = min(m, n)"""
    U: Tensor
    S: Tensor
    Vt: Tensor

    def reconstruct(self, rank: int | None = None) -> Tensor:
        r = len(self.S) if rank is None else rank
        return (self.U[:, :r] * self.S[:r]) @ self.Vt[:r, :]


def as_tensor(values: ArrayLike) -> Tensor:
    return np.ascontiguousarray(values, dtype=np.float64)


@lru_cache(maxsize=64)
def _round_robin(n: int) -> List[NDArray[np.intp]]:
    """Pairings (p < q) of n columns such that each round holds disjoint pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a >= 0 and b >= 0:
                pairs.append((min(a, b), max(a, b)))
        if pairs:
            rounds.append(np.array(pairs, dtype=np.intp))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_tall(A: Tensor) -> SvdFactors:
    """One-sided Jacobi on a tall matrix (m >= n)."""
    m, n = A.shape
    A = A.copy()
    V = np.eye(n)
    rounds = _round_robin(n)

    for sweep in range(JACOBI_MAX_SWEEPS):
        off = 0.0
        for pairs in rounds:
            P, Q = pairs[:, 0], pairs[:, 1]
            ap, aq = A[:, P], A[:, Q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            norm = np.sqrt(alpha * beta)
            active = (norm > 0) & (np.abs(gamma) > JACOBI_TOL * norm)
            if not active.any():
                continue
            off = max(off, float(np.max(np.abs(gamma[active]) / norm[active])))

            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)

            A[:, P], A[:, Q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = V[:, P], V[:, Q]
            V[:, P], V[:, Q] = c * vp - s * vq, s * vp + c * vq
        if off <= JACOBI_TOL:
            break
    else:
        logger.warning("Jacobi SVD stopped after %d sweeps without full convergence", JACOBI_MAX_SWEEPS)

    sigma = np.sqrt(np.einsum("ij,ij->j", A, A))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    A = A[:, order]
    V = V[:, order]

    # Columns with negligible norm carry no direction; complete U instead.
    cutoff = (sigma[0] if n else 0.0) * max(m, n) * np.finfo(np.float64).eps
    valid = sigma > cutoff
    U = np.zeros((m, n))
    U[:, valid] = A[:, valid] / sigma[valid]
    if not valid.all():
        U = _complete_basis(U, valid)
    return SvdFactors(U=U, S=sigma, Vt=np.ascontiguousarray(V.T))


def _complete_basis(U: Tensor, valid: NDArray[np.bool_]) -> Tensor:
    """Fill invalid columns with unit vectors orthogonal to everything before them."""
    m = U.shape[0]
    basis = [U[:, j] for j in np.flatnonzero(valid)]
    candidates = iter(np.eye(m))
    for j in np.flatnonzero(~valid):
        for e in candidates:
            w = e.copy()
            for _ in range(2):  # re-orthogonalise once for stability
                for b in basis:
                    w -= (b @ w) * b
            norm = np.linalg.norm(w)
            if norm > 1e-8:
                U[:, j] = w / norm
                basis.append(U[:, j])
                break
    return U


def svd(W: ArrayLike) -> SvdFactors:
    """
    Thin singular value decomposition.

    Singular values come back non-negative and non-increasing; the signs of
    singular vectors are whatever the rotations produced.
    """
    W = as_tensor(W)
    if W.ndim != 2:
        raise DimensionalityError(f"svd expects a 2-D matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise NumericInputError("svd input contains non-finite entries")

    m, n = W.shape
    if m == 0 or n == 0:
        p = min(m, n)
        return SvdFactors(U=np.zeros((m, p)), S=np.zeros(p), Vt=np.zeros((p, n)))
    if m >= n:
        return _jacobi_tall(W)
    f = _jacobi_tall(np.ascontiguousarray(W.T))
    return SvdFactors(U=np.ascontiguousarray(f.Vt.T), S=f.S, Vt=np.ascontiguousarray(f.U.T))


def top_k_indices(values: ArrayLike, k: int) -> NDArray[np.int64]:
    """
    Indices of the k largest |values|, ties broken by lower index, sorted ascending.
    """
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if k < 0 or k > flat.size:
        raise BudgetError(f"cannot select {k} of {flat.size} entries")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-np.abs(flat), kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def make_rng(seed: int, *keys: Union[str, int]) -> np.random.Generator:
    """
    Philox (counter-based) stream for a seed and optional sub-stream keys.

    Keys are hashed to integers so the same (seed, keys) gives the same
    stream on every platform.
    """
    spawn_key = tuple(stable_int(k) for k in keys)
    sequence = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(sequence))


def frobenius(W: ArrayLike) -> float:
    return float(np.linalg.norm(np.asarray(W, dtype=np.float64)))


def relative_error(approx: ArrayLike, exact: ArrayLike) -> float:
    denom = frobenius(exact)
    diff = frobenius(np.asarray(approx) - np.asarray(exact))
    return diff if denom == 0.0 else diff / denom


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))
