"""Streaming estimation of compressed moments.

Two paths produce the orthonormal bases U1, U2, U3 and the compressed
moments m1, m2, m3:

* Gaussian path (no CTF): one pass forms the sketches
  Y2 = M2 G and Y3 = M3_[1] (G1 . G2)^T, the bases come from their SVDs and a
  second pass projects each image,
  m1 = mean U1^H I,  m2 = mean (U2^H I)(U2^H I)^H,  m3 = mean (U3^H I)^{x3}.
* CUR path (CTF present): one pass accumulates numerators of the
  element-wise least-squares estimators on sampled columns and fibers; the
  denominators only depend on the CTF groups.

Noise bias (white noise of variance sigma^2 through an orthonormal DFT) is

    B2 = sigma^2 sum_j diag(H_j^2),
    B3_abc = sigma^2 sum_j [ (H_j^2 M1)_a H_jb H_jc P_bc + (two more placements) ],

where P maps frequency k to -k.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forward import FreqGrid, ImageStack
from .tensorkit import (
    SketchConfig,
    _pinv,
    complex_gaussian,
    energy_rank,
    norm_weighted_sample,
    range_from_sketch,
    symmetrize3,
    trim_hermitian,
    trim_symmetric_tucker,
)

__all__ = [
    "SubspaceMoments",
    "MomentProbe",
    "DEFAULT_BATCH",
    "sketch_moments",
    "sketch_m2",
    "sketch_m3",
    "project_moments",
    "estimate_moments",
    "cur_moments",
    "sample_freq_indices",
    "explicit_moments",
    "probe_error",
    "bias3_projected",
]

DEFAULT_BATCH = 1024
STARVATION = 1e-12


@dataclass
class SubspaceMoments:
    U1: np.ndarray
    U2: np.ndarray
    U3: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    m3: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def ranks(self) -> tuple[int, int, int]:
        return self.U1.shape[1], self.U2.shape[1], self.U3.shape[1]

    @property
    def d(self) -> int:
        return self.U2.shape[0]

    def lifted_m2(self, J=None) -> np.ndarray:
        U = self.U2 if J is None else self.U2[J]
        return U @ self.m2 @ U.conj().T

    def lifted_m3(self, J=None) -> np.ndarray:
        U = self.U3 if J is None else self.U3[J]
        return np.einsum("ijk,ai,bj,ck->abc", self.m3, U, U, U, optimize=True)


@dataclass
class MomentProbe:
    J: np.ndarray
    E2: float
    E3: float


def _require_no_ctf(stack: ImageStack):
    if stack.has_ctf:
        raise ValueError("stack carries CTFs; use cur_moments")


def _sketch_mats(d: int, cfg2: SketchConfig, cfg3: SketchConfig):
    G = complex_gaussian((d, cfg2.s), cfg2.seed)
    G1 = complex_gaussian((cfg3.s, d), [cfg3.seed, 1])
    G2 = complex_gaussian((cfg3.s, d), [cfg3.seed, 2])
    return G, G1, G2


def _image_weights(stack: ImageStack, weights):
    """Per-image weights summing to one (uniform 1/N by default)."""
    N = len(stack)
    if N == 0:
        raise ValueError("empty stack")
    if weights is None:
        return None, 1.0 / N
    w = np.asarray(weights, dtype=float)
    if w.shape != (N,):
        raise ValueError("one weight per image is required")
    return w, 1.0


def sketch_moments(stack: ImageStack, cfg2: SketchConfig, cfg3: SketchConfig, sigma2: float | None = None,
                   batch: int = DEFAULT_BATCH, need: tuple[bool, bool] = (True, True), weights=None):
    """One pass over the stack forming Y2 = M2 G and Y3 = M3_[1] (G1 . G2)^T.

    With ``sigma2`` the sketched noise bias is subtracted.  ``weights``
    replaces the empirical average by a weighted sum (quadrature nodes).
    Returns a dict with U2, sigma2_vals, U3, sigma3_vals, flags and the
    mean image.
    """
    _require_no_ctf(stack)
    N = len(stack)
    w, scale = _image_weights(stack, weights)
    d = stack.d
    G, G1, G2 = _sketch_mats(d, cfg2, cfg3)
    Y2 = np.zeros((d, cfg2.s), dtype=complex) if need[0] else None
    Y3 = np.zeros((d, cfg3.s), dtype=complex) if need[1] else None
    M1 = np.zeros(d, dtype=complex)
    for lo, X in stack.iter_blocks(batch):
        Xw = X if w is None else X * w[lo:lo + len(X), None]
        M1 += Xw.sum(0)
        if Y2 is not None:
            Y2 += Xw.T @ (X.conj() @ G)
        if Y3 is not None:
            Z = (X @ G1.T) * (X @ G2.T)
            Y3 += Xw.T @ Z
    M1 *= scale
    out = {"M1": M1, "N": N}
    if Y2 is not None:
        Y2 *= scale
        if sigma2:
            Y2 -= sigma2 * G
        out["U2"], out["sigma2_vals"], out["flag2"] = range_from_sketch(Y2, cfg2.tau, cfg2.r_max)
    if Y3 is not None:
        Y3 *= scale
        if sigma2:
            neg = stack.grid.neg
            g = np.sum(G1 * G2[:, neg], axis=1)
            Y3 -= sigma2 * (np.outer(M1, g) + G2[:, neg].T * (G1 @ M1) + G1[:, neg].T * (G2 @ M1))
        out["U3"], out["sigma3_vals"], out["flag3"] = range_from_sketch(Y3, cfg3.tau, cfg3.r_max)
    return out


def sketch_m2(stack: ImageStack, cfg: SketchConfig, batch: int = DEFAULT_BATCH):
    """(U2, singular values) from the Gaussian sketch of the second moment."""
    res = sketch_moments(stack, cfg, cfg, batch=batch, need=(True, False))
    return res["U2"], res["sigma2_vals"]


def sketch_m3(stack: ImageStack, cfg: SketchConfig, batch: int = DEFAULT_BATCH):
    """(U3, singular values) from the face-splitting sketch of the third moment."""
    res = sketch_moments(stack, cfg, cfg, batch=batch, need=(False, True))
    return res["U3"], res["sigma3_vals"]


def bias3_projected(t: np.ndarray, U: np.ndarray, neg: np.ndarray, sigma2: float) -> np.ndarray:
    """Projected third-moment bias for H = 1: sigma^2 sum of the three
    placements of t (x) Q with t = U^H M1 and Q = U^H P conj(U)."""
    Q = U.conj().T @ U[neg].conj()
    T1 = t[:, None, None] * Q[None, :, :]
    return sigma2 * (T1 + T1.transpose(1, 0, 2) + T1.transpose(1, 2, 0))


def project_moments(stack: ImageStack, U1: np.ndarray, U2: np.ndarray, U3: np.ndarray, debias: bool = False,
                    sigma2: float | None = None, batch: int = DEFAULT_BATCH, meta: dict | None = None,
                    weights=None) -> SubspaceMoments:
    """Compressed moments in one streaming pass (weighted sum when
    ``weights`` is given)."""
    _require_no_ctf(stack)
    if debias and sigma2 is None:
        raise ValueError("debiasing requires the noise variance")
    N = len(stack)
    w, scale = _image_weights(stack, weights)
    r1, r2, r3 = U1.shape[1], U2.shape[1], U3.shape[1]
    m1 = np.zeros(r1, dtype=complex)
    m2 = np.zeros((r2, r2), dtype=complex)
    m3 = np.zeros((r3, r3 * r3), dtype=complex)
    M1 = np.zeros(stack.d, dtype=complex)
    C1, C2, C3 = U1.conj(), U2.conj(), U3.conj()
    for lo, X in stack.iter_blocks(batch):
        wb = np.ones(len(X)) if w is None else w[lo:lo + len(X)]
        M1 += wb @ X
        m1 += wb @ (X @ C1)
        V = X @ C2
        m2 += (V * wb[:, None]).T @ V.conj()
        V = X @ C3
        m3 += (V * wb[:, None]).T @ (V[:, :, None] * V[:, None, :]).reshape(len(V), -1)
    m1 *= scale
    m2 *= scale
    m3 = m3.reshape(r3, r3, r3) * scale
    M1 *= scale
    if debias and sigma2:
        m2 -= sigma2 * (U2.conj().T @ U2)
        m3 -= bias3_projected(U3.conj().T @ M1, U3, stack.grid.neg, sigma2)
    m2 = 0.5 * (m2 + m2.conj().T)
    m3 = symmetrize3(m3)
    info = dict(N=N, debias=bool(debias), sigma2=float(sigma2 or 0.0), path="gaussian")
    info.update(meta or {})
    return SubspaceMoments(U1, U2, U3, m1, m2, m3, info)


def estimate_moments(stack: ImageStack, cfg2: SketchConfig, cfg3: SketchConfig, debias: bool = False,
                     sigma2: float | None = None, batch: int = DEFAULT_BATCH) -> SubspaceMoments:
    """Gaussian path: sketch, then project (U1 = U2)."""
    if debias and sigma2 is None:
        sigma2 = stack.noise_var
    sk = sketch_moments(stack, cfg2, cfg3, sigma2=sigma2 if debias else None, batch=batch)
    meta = dict(seed2=cfg2.seed, seed3=cfg3.seed, tau2=cfg2.tau, tau3=cfg3.tau, s=cfg2.s,
                r2_max=cfg2.r_max, r3_max=cfg3.r_max, flag2=bool(sk["flag2"]), flag3=bool(sk["flag3"]))
    return project_moments(stack, sk["U2"], sk["U2"], sk["U3"], debias, sigma2, batch, meta)


# ----------------------------------------------------------------------------
# CUR path
# ----------------------------------------------------------------------------

def sample_freq_indices(grid: FreqGrid, count: int, seed) -> np.ndarray:
    """Active-pixel indices drawn without replacement with p ~ 1/|xi|^2;
    the zero frequency is always included."""
    active = np.flatnonzero(grid.mask)
    if count < 1 or count > len(active):
        raise ValueError(f"count must lie in 1..{len(active)}")
    rest = active[active != grid.dc]
    w = 1.0 / grid.radius[rest] ** 2
    pick = rest[norm_weighted_sample(w, count - 1, seed)] if count > 1 else np.zeros(0, dtype=int)
    return np.concatenate([[grid.dc], pick]).astype(int)


def _safe_divide(num: np.ndarray, den: np.ndarray):
    bad = np.abs(den) < STARVATION
    out = np.where(bad, 0.0, num / np.where(bad, 1.0, den))
    return out, int(bad.sum())


class _GroupStats:
    """CTF-group bookkeeping: h_g = H_g^2 and counts n_g."""

    def __init__(self, stack: ImageStack):
        self.H = stack.ctf_table()
        self.h = self.H ** 2
        self.n = stack.group_counts()
        self.neg = stack.grid.neg

    def d1(self):
        return self.n @ self.h

    def bias3(self, M1, A, B, C, sigma2):
        """B3 on the block A x B x C of index arrays.

        Only entries whose paired indices satisfy k' = -k are nonzero, so the
        three placements are accumulated over those pairs only.
        """
        A, B, C = (np.asarray(x, dtype=int) for x in (A, B, C))
        H, h, n, neg = self.H, self.h, self.n, self.neg
        out = np.zeros((len(A), len(B), len(C)), dtype=complex)
        for (X, Y, Z), axes in (((A, B, C), (0, 1, 2)), ((B, A, C), (1, 0, 2)), ((C, A, B), (2, 0, 1))):
            # slot X carries M1, slots (Y, Z) carry the pair; axes gives their output axes
            pos = {int(z): k for k, z in enumerate(Z)}
            for j, y in enumerate(Y):
                k = pos.get(int(neg[y]))
                if k is None:
                    continue
                w = n * H[:, y] * H[:, Z[k]]
                vec = (w @ h[:, X]) * M1[X]
                # place vec along the X axis at (j, k) of the (Y, Z) axes
                idx = [None, None, None]
                idx[axes[0]] = slice(None)
                idx[axes[1]] = j
                idx[axes[2]] = k
                out[tuple(idx)] += vec
        return sigma2 * out


def _cur_pass(stack: ImageStack, J, S, J1, J2, batch):
    """Numerator sums of the CUR estimators in one pass."""
    H = stack.ctf_table()
    gidx = stack.group_index()
    d = stack.d
    N1 = np.zeros(d, dtype=complex)
    N2 = np.zeros((d, len(J)), dtype=complex)
    N3W = np.zeros((d, len(J1) * len(J2)), dtype=complex)
    N3Y = np.zeros((len(S), len(S) ** 2), dtype=complex)
    for lo, X in stack.iter_blocks(batch):
        Y = X * H[gidx[lo:lo + len(X)]]
        N1 += Y.sum(0)
        N2 += Y.T @ Y[:, J].conj()
        Z = (Y[:, J1][:, :, None] * Y[:, J2][:, None, :]).reshape(len(Y), -1)
        N3W += Y.T @ Z
        YS = Y[:, S]
        N3Y += YS.T @ (YS[:, :, None] * YS[:, None, :]).reshape(len(Y), -1)
    return N1, N2, N3W, N3Y.reshape(len(S), len(S), len(S))


def cur_moments(stack: ImageStack, J, S, J1, J2, eps: float = 1e-5, tau2: float = 1e-8, tau3: float = 1e-6,
                r2_max: int | None = 220, r3_max: int | None = 120, debias: bool = False,
                sigma2: float | None = None, batch: int = DEFAULT_BATCH) -> SubspaceMoments:
    """Compressed moments through CUR approximations of the least-squares
    moment estimators (works with or without CTFs)."""
    if debias and sigma2 is None:
        sigma2 = stack.noise_var
    J, S, J1, J2 = (np.asarray(x, dtype=int) for x in (J, S, J1, J2))
    gs = _GroupStats(stack)
    N1, N2, N3W, N3Y = _cur_pass(stack, J, S, J1, J2, batch)
    h, n = gs.h, gs.n
    D1 = gs.d1()
    D2 = np.einsum("g,ga,gj->aj", n, h, h[:, J])
    hJJ = (h[:, J1][:, :, None] * h[:, J2][:, None, :]).reshape(len(n), -1)
    D3W = np.einsum("g,ga,gj->aj", n, h, hJJ)
    hS = h[:, S]
    D3Y = np.einsum("g,ga,gb,gc->abc", n, hS, hS, hS)

    M1, bad1 = _safe_divide(N1, D1)
    if debias and sigma2:
        N2[J, np.arange(len(J))] -= sigma2 * D1[J]
        N3W -= gs.bias3(M1, np.arange(stack.d), J1, J2, sigma2).reshape(stack.d, -1)
        N3Y -= gs.bias3(M1, S, S, S, sigma2)
    C2, bad2 = _safe_divide(N2, D2)
    W3, bad3 = _safe_divide(N3W, D3W)
    Yc, bad4 = _safe_divide(N3Y, D3Y)

    W2 = C2[J, :]
    W2 = 0.5 * (W2 + W2.conj().T)
    W2p, kept2 = _pinv(W2, eps, hermitian=True)
    f2 = trim_hermitian(C2, W2p, tau2, r2_max)
    C3 = W3[S, :]
    C3p, kept3 = _pinv(C3, eps)
    F = W3 @ C3p
    f3 = trim_symmetric_tucker(F, symmetrize3(Yc), tau3, r3_max)

    U2 = f2.basis
    m2 = f2.core
    U3 = f3.basis
    m3 = symmetrize3(f3.core)
    m1 = U2.conj().T @ M1
    meta = dict(N=len(stack), debias=bool(debias), sigma2=float(sigma2 or 0.0), path="cur", eps=eps,
                tau2=tau2, tau3=tau3, r2_max=r2_max, r3_max=r3_max, masked=bad1 + bad2 + bad3 + bad4,
                J=len(J), S=len(S), J1=len(J1), J2=len(J2), flag2=bool(f2.flagged), flag3=bool(f3.flagged))
    return SubspaceMoments(U2, U2, U3, m1, m2, m3, meta)


# ----------------------------------------------------------------------------
# explicit estimators and probes
# ----------------------------------------------------------------------------

def explicit_moments(stack: ImageStack, J=None, debias: bool = False, sigma2: float | None = None,
                     batch: int = DEFAULT_BATCH, order: int = 3):
    """Least-squares moment estimators restricted to the index set J
    (all pixels when None): returns (M1_J, M2_JJ, M3_JJJ or None)."""
    if debias and sigma2 is None:
        sigma2 = stack.noise_var
    d = stack.d
    J = np.arange(d) if J is None else np.asarray(J, dtype=int)
    gs = _GroupStats(stack)
    H = gs.H
    gidx = stack.group_index()
    k = len(J)
    N1 = np.zeros(d, dtype=complex)
    N2 = np.zeros((k, k), dtype=complex)
    N3 = np.zeros((k, k * k), dtype=complex) if order >= 3 else None
    for lo, X in stack.iter_blocks(batch):
        Y = X * H[gidx[lo:lo + len(X)]]
        N1 += Y.sum(0)
        YJ = Y[:, J]
        N2 += YJ.T @ YJ.conj()
        if N3 is not None:
            N3 += YJ.T @ (YJ[:, :, None] * YJ[:, None, :]).reshape(len(Y), -1)
    h, n = gs.h, gs.n
    M1, _ = _safe_divide(N1, gs.d1())
    if debias and sigma2:
        N2 -= sigma2 * np.diag(gs.d1()[J])
    D2 = np.einsum("g,ga,gb->ab", n, h[:, J], h[:, J])
    M2, _ = _safe_divide(N2, D2)
    M3 = None
    if N3 is not None:
        N3 = N3.reshape(k, k, k)
        if debias and sigma2:
            N3 -= gs.bias3(M1, J, J, J, sigma2)
        hJ = h[:, J]
        D3 = np.einsum("g,ga,gb,gc->abc", n, hJ, hJ, hJ)
        M3, _ = _safe_divide(N3, D3)
    return M1[J], M2, M3


def probe_error(stack: ImageStack, sm: SubspaceMoments, J=None, seed=0, size: int = 32,
                batch: int = DEFAULT_BATCH) -> MomentProbe:
    """Relative errors of the lifted compressed moments on the J x J block
    and the J x J x J sub-tensor of the explicit estimators."""
    if J is None:
        J = sample_freq_indices(stack.grid, size, seed)
    J = np.asarray(J, dtype=int)
    debias = bool(sm.meta.get("debias", False))
    sigma2 = sm.meta.get("sigma2", stack.noise_var)
    _, M2, M3 = explicit_moments(stack, J, debias, sigma2, batch)
    n2 = np.linalg.norm(M2)
    n3 = np.linalg.norm(M3)
    E2 = np.linalg.norm(M2 - sm.lifted_m2(J)) / n2 if n2 > 0 else 0.0
    E3 = np.linalg.norm(M3 - sm.lifted_m3(J)) / n3 if n3 > 0 else 0.0
    return MomentProbe(J, float(E2), float(E3))
