"""Dense tensor algebra and randomized low-rank primitives.

Mode products follow

    (M x_k U)[..., j, ...] = sum_i M[..., i, ...] U[i, j],

so projecting onto an orthonormal basis U is ``mode_contract(M, U.conj(), k)``
and lifting back is ``mode_contract(core, U.T, k)``.  Modes are numbered
from 1.  Unfoldings order the remaining indices with the lowest mode
varying fastest.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla

__all__ = [
    "SketchConfig",
    "TuckerFactor",
    "complex_gaussian",
    "mode_contract",
    "unfold",
    "refold",
    "project3",
    "lift3",
    "symmetrize3",
    "energy_rank",
    "randomized_range",
    "face_split_apply",
    "face_split_matrix",
    "cur_matrix",
    "trim_hermitian",
    "trim_symmetric_tucker",
    "norm_weighted_sample",
]


@dataclass(frozen=True)
class SketchConfig:
    """Sketch size s, seed and energy threshold tau (optional rank cap)."""

    s: int = 250
    seed: int = 0
    tau: float = 1e-8
    r_max: int | None = None

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("sketch size must be positive")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")


@dataclass
class TuckerFactor:
    """Orthonormal basis (d x r) with a matching core (r x r or r x r x r)."""

    basis: np.ndarray
    core: np.ndarray
    singular_values: np.ndarray | None = None
    flagged: bool = False

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def full(self) -> np.ndarray:
        U = self.basis
        if self.core.ndim == 2:
            return U @ self.core @ U.conj().T
        return lift3(self.core, U)


def complex_gaussian(shape, seed) -> np.ndarray:
    """Entries with independent N(0, 1/2) real and imaginary parts."""
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(0.5)


def _check_mode(M: np.ndarray, k: int) -> int:
    if k not in range(1, M.ndim + 1):
        raise ValueError(f"mode must be in 1..{M.ndim}, got {k}")
    return k - 1


def mode_contract(M: np.ndarray, U: np.ndarray, k: int) -> np.ndarray:
    """Mode-k product M x_k U with U of shape (d_k, r)."""
    M = np.asarray(M)
    ax = _check_mode(M, k)
    U = np.asarray(U)
    if U.ndim != 2 or U.shape[0] != M.shape[ax]:
        raise ValueError(f"U has shape {U.shape}, mode {k} has size {M.shape[ax]}")
    out = np.tensordot(M, U, axes=([ax], [0]))
    return np.moveaxis(out, -1, ax)


def unfold(M: np.ndarray, k: int) -> np.ndarray:
    """Mode-k unfolding: column index 1 + sum_{k' != k} (i_k' - 1) prod_{l' < k', l' != k} d_l'."""
    M = np.asarray(M)
    ax = _check_mode(M, k)
    return np.moveaxis(M, ax, 0).reshape(M.shape[ax], -1, order="F")


def refold(A: np.ndarray, k: int, shape) -> np.ndarray:
    """Inverse of unfold for a tensor of the given shape."""
    shape = tuple(shape)
    ax = k - 1
    if not 0 <= ax < len(shape):
        raise ValueError("invalid mode")
    rest = shape[:ax] + shape[ax + 1:]
    T = np.asarray(A).reshape((shape[ax],) + rest, order="F")
    return np.moveaxis(T, 0, ax)


def project3(M: np.ndarray, U: np.ndarray) -> np.ndarray:
    """M x_1 conj(U) x_2 conj(U) x_3 conj(U)."""
    Uc = U.conj()
    return np.einsum("abc,ai,bj,ck->ijk", M, Uc, Uc, Uc, optimize=True)


def lift3(core: np.ndarray, U: np.ndarray) -> np.ndarray:
    """core x_1 U^T x_2 U^T x_3 U^T, the inverse of project3 on span(U)^{x3}."""
    return np.einsum("ijk,ai,bj,ck->abc", core, U, U, U, optimize=True)


def symmetrize3(T: np.ndarray) -> np.ndarray:
    """Average over all six index permutations."""
    return (T + T.transpose(0, 2, 1) + T.transpose(1, 0, 2) + T.transpose(1, 2, 0)
            + T.transpose(2, 0, 1) + T.transpose(2, 1, 0)) / 6.0


def energy_rank(sigma: np.ndarray, tau: float, r_max: int | None = None) -> int:
    """Smallest r with sum_{i<=r} sigma_i^2 / sum sigma_i^2 > 1 - tau, capped by r_max."""
    sigma = np.asarray(sigma, dtype=float)
    e = sigma ** 2
    total = e.sum()
    if total <= 0 or not np.isfinite(total):
        return 0
    frac = np.cumsum(e) / total
    r = int(np.searchsorted(frac, 1.0 - tau, side="right")) + 1
    r = min(r, len(sigma))
    if r_max is not None:
        r = min(r, int(r_max))
    return r


def randomized_range(stream_apply: Callable[[np.ndarray], np.ndarray], d: int, cfg: SketchConfig):
    """Range finder for an implicitly given d x d operator.

    ``stream_apply(S)`` must return A @ S for the (d, s) complex Gaussian S
    drawn from ``cfg.seed``.  Returns (U, sigma, flagged) where U holds the
    leading left singular vectors of Y = A S selected by the energy rule and
    sigma all singular values of Y; ``flagged`` marks a zero sketch.
    """
    S = complex_gaussian((d, cfg.s), cfg.seed)
    Y = stream_apply(S)
    return range_from_sketch(Y, cfg.tau, cfg.r_max)


def range_from_sketch(Y: np.ndarray, tau: float, r_max: int | None = None):
    """Leading left singular vectors of a sketch by the energy rule."""
    if not np.any(Y):
        return np.zeros((Y.shape[0], 0), dtype=complex), np.zeros(0), True
    U, sigma, _ = sla.svd(Y, full_matrices=False, lapack_driver="gesdd")
    r = energy_rank(sigma, tau, r_max)
    return U[:, :r], sigma, r == 0


def face_split_matrix(G1: np.ndarray, G2: np.ndarray) -> np.ndarray:
    """Explicit s x d1*d2 face-splitting product: row r is kron(G1[r], G2[r])."""
    if G1.shape[0] != G2.shape[0]:
        raise ValueError("row counts differ")
    return (G1[:, :, None] * G2[:, None, :]).reshape(G1.shape[0], -1)


def face_split_apply(G1: np.ndarray, G2: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(G1 x) * (G2 y), equal to face_split_matrix(G1, G2) @ kron(x, y)."""
    G1, G2 = np.asarray(G1), np.asarray(G2)
    if G1.shape[0] != G2.shape[0] or G1.shape[1] != len(x) or G2.shape[1] != len(y):
        raise ValueError("dimension mismatch")
    return (G1 @ x) * (G2 @ y)


def _pinv(W: np.ndarray, eps: float, hermitian: bool = False) -> tuple[np.ndarray, int]:
    """Pseudoinverse dropping singular values below eps * sigma_max."""
    if hermitian:
        lam, V = np.linalg.eigh(W)
        smax = np.abs(lam).max(initial=0.0)
        keep = np.abs(lam) >= eps * smax if smax > 0 else np.zeros_like(lam, dtype=bool)
        return (V[:, keep] / lam[keep]) @ V[:, keep].conj().T, int(keep.sum())
    U, s, Vh = np.linalg.svd(W, full_matrices=False)
    smax = s.max(initial=0.0)
    keep = s >= eps * smax if smax > 0 else np.zeros_like(s, dtype=bool)
    return (Vh[keep].conj().T / s[keep]) @ U[:, keep].conj().T, int(keep.sum())


def trim_hermitian(C: np.ndarray, Wpinv: np.ndarray, tau: float = 1e-12, r_max: int | None = None) -> TuckerFactor:
    """Orthonormal factorization of C W^+ C^H.

    QR of C, eigendecomposition of R W^+ R^H, eigenvalues ordered by
    magnitude and truncated by the energy rule.
    """
    Q, R = np.linalg.qr(C)
    K = R @ Wpinv @ R.conj().T
    K = 0.5 * (K + K.conj().T)
    lam, V = np.linalg.eigh(K)
    order = np.argsort(-np.abs(lam))
    lam, V = lam[order], V[:, order]
    r = energy_rank(np.abs(lam), tau, r_max)
    return TuckerFactor(Q @ V[:, :r], np.diag(lam[:r]).astype(complex), np.abs(lam), flagged=r == 0)


def cur_matrix(col_fetch: Callable[[np.ndarray], np.ndarray], J, hermitian: bool = True, eps: float = 1e-5,
               tau: float = 1e-12, r_max: int | None = None) -> TuckerFactor:
    """CUR approximation of a Hermitian matrix from the columns J.

    ``col_fetch(J)`` returns the d x |J| column block C = A[:, J];
    W = C[J, :].  Returns the trimmed factorization of C W^+ C^H.
    """
    J = np.asarray(J, dtype=int)
    if J.size < 1:
        raise ValueError("J must be nonempty")
    if not hermitian:
        raise NotImplementedError("only the Hermitian path is used")
    C = np.asarray(col_fetch(J))
    W = C[J, :]
    W = 0.5 * (W + W.conj().T)
    Wp, kept = _pinv(W, eps, hermitian=True)
    if kept == 0:
        return TuckerFactor(np.zeros((C.shape[0], 0), dtype=complex), np.zeros((0, 0), dtype=complex),
                            np.zeros(0), flagged=True)
    return trim_hermitian(C, Wp, tau, r_max)


def trim_symmetric_tucker(F: np.ndarray, Y: np.ndarray, tau: float = 1e-12, r_max: int | None = None) -> TuckerFactor:
    """Orthonormal Tucker form of Y x_1 F^T x_2 F^T x_3 F^T for symmetric Y.

    QR of the factor F (d x s), core G = Y x_k R^T, SVD of the unfolding of G,
    then truncation by the energy rule.
    """
    Q, R = np.linalg.qr(F)
    G = np.einsum("abc,ia,jb,kc->ijk", Y, R, R, R, optimize=True)
    G = symmetrize3(G)
    Uc, sig, _ = np.linalg.svd(unfold(G, 1), full_matrices=False)
    r = energy_rank(sig, tau, r_max)
    Ut = Uc[:, :r]
    core = project3(G, Ut)
    return TuckerFactor(Q @ Ut, core, sig, flagged=r == 0)


def norm_weighted_sample(weights, count: int, seed) -> np.ndarray:
    """Draw ``count`` distinct indices, each draw proportional to the
    remaining weights."""
    w = np.asarray(weights, dtype=float).copy()
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative with at least one positive entry")
    if count > int((w > 0).sum()):
        raise ValueError("count exceeds the number of positive weights")
    rng = np.random.default_rng(seed)
    out = np.empty(count, dtype=int)
    for t in range(count):
        c = np.cumsum(w)
        i = int(np.searchsorted(c, rng.uniform(0, c[-1]), side="right"))
        i = min(i, len(w) - 1)
        while w[i] == 0:  # guard the measure-zero boundary case
            i -= 1
        out[t] = i
        w[i] = 0.0
    return out
