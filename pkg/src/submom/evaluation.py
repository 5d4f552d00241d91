"""Rendering, alignment, Fourier shell correlation and density errors.

Volumes are rendered by sampling the Fourier expansion on the centered n^3
frequency grid k/n (zero outside the ball |xi| <= 1/2 and on the unpaired
k = -n/2 planes) and applying the orthonormal inverse DFT.  With that
convention the orthonormal 2-D DFT of a projection along z equals
sqrt(n) times the central slice.

Alignment works on coefficients: rotating a volume by R multiplies each
degree block by the Wigner matrix, a_l -> D^l(R) a_l, and the point
reflection multiplies it by (-1)^l.  The correlation over ZYZ Euler angles
is evaluated for all alpha, gamma at once with a 2-D FFT per beta, then
refined locally.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize

from .forward import BAND_LIMIT, DensityBasis, DensityCoeffs, VolumeBasis, VolumeCoeffs
from .quadrature import sphere_rule
from .specfun import euler_to_matrix, matrix_to_euler, wigner_D_matrices, wigner_d_matrices

__all__ = [
    "RealVolume",
    "FscCurve",
    "Alignment",
    "RealnessError",
    "render",
    "volume_fourier_grid",
    "expand",
    "rotate_coeffs",
    "reflect_coeffs",
    "rotate_density",
    "align_coeffs",
    "align",
    "fsc",
    "density_error",
    "density_error_parseval",
]

REALNESS_RTOL = 1e-8


class RealnessError(ValueError):
    pass


@dataclass
class RealVolume:
    data: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3 or len(set(self.data.shape)) != 1:
            raise ValueError("volume must be a cubic 3-D array")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume has non-finite entries")

    @property
    def n(self) -> int:
        return self.data.shape[0]


def volume_fourier_grid(n: int):
    """Centered frequency coordinates (n, n, n, 3) in cycles per voxel with
    axis order (z, y, x) and the active mask."""
    if n < 2 or n % 2:
        raise ValueError("grid size must be even and >= 2")
    k = np.arange(-n // 2, n // 2)
    KZ, KY, KX = np.meshgrid(k, k, k, indexing="ij")
    xi = np.stack([KX, KY, KZ], -1) / n
    mask = (np.linalg.norm(xi, axis=-1) <= BAND_LIMIT) & (KX > -n // 2) & (KY > -n // 2) & (KZ > -n // 2)
    return xi, mask


def _centered_fftn(x):
    return np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(x), norm="ortho"))


def _centered_ifftn(x):
    return np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(x), norm="ortho"))


def render(vc: VolumeCoeffs, n: int, voxel_size: float = 1.0, chunk: int = 8192) -> RealVolume:
    """Real-space volume on an n^3 grid; array axes are (z, y, x)."""
    xi, mask = volume_fourier_grid(n)
    F = np.zeros((n, n, n), dtype=complex)
    pts = xi[mask]
    vals = np.empty(len(pts), dtype=complex)
    for lo in range(0, len(pts), chunk):
        vals[lo:lo + chunk] = vc.basis.evaluate(vc.a, pts[lo:lo + chunk])
    F[mask] = vals
    V = _centered_ifftn(F)
    scale = np.linalg.norm(V)
    if scale > 0 and np.linalg.norm(V.imag) > REALNESS_RTOL * scale:
        raise RealnessError(f"imaginary residue {np.linalg.norm(V.imag) / scale:.2e} exceeds tolerance")
    return RealVolume(V.real, voxel_size)


def expand(vol: RealVolume, basis: VolumeBasis, chunk: int = 8192) -> VolumeCoeffs:
    """Least-squares coefficients (realness enforced) of a real volume."""
    n = vol.n
    xi, mask = volume_fourier_grid(n)
    F = _centered_fftn(vol.data)[mask]
    pts = xi[mask]
    J = basis.realness_matrix
    G = np.zeros((basis.size, basis.size))
    rhs = np.zeros(basis.size)
    for lo in range(0, len(pts), chunk):
        A = basis.design(pts[lo:lo + chunk]) @ J
        G += (A.conj().T @ A).real
        rhs += (A.conj().T @ F[lo:lo + chunk]).real
    at = np.linalg.lstsq(G, rhs, rcond=None)[0]
    return VolumeCoeffs.from_real(basis, at)


# ----------------------------------------------------------------------------
# rotations of coefficients
# ----------------------------------------------------------------------------

def _euler(R):
    R = np.asarray(R, dtype=float)
    if R.shape == (3, 3):
        return matrix_to_euler(R)
    return tuple(float(x) for x in R)


def rotate_coeffs(vc: VolumeCoeffs, R) -> VolumeCoeffs:
    """Coefficients of V(R^{-1} x); R is a matrix or ZYZ Euler triple."""
    alpha, beta, gamma = _euler(R)
    basis = vc.basis
    Ds = wigner_D_matrices(basis.L, alpha, beta, gamma)
    a = vc.a.copy()
    for l in basis.degrees:
        sl = basis.block(l)
        a[sl] = (Ds[l] @ vc.a[sl].reshape(2 * l + 1, basis.S[l])).ravel()
    return VolumeCoeffs(basis, a)


def reflect_coeffs(vc: VolumeCoeffs) -> VolumeCoeffs:
    """Coefficients of V(-x)."""
    basis = vc.basis
    a = vc.a.copy()
    for l in basis.degrees:
        if l % 2:
            a[basis.block(l)] *= -1
    return VolumeCoeffs(basis, a)


def rotate_density(dc: DensityCoeffs, R) -> DensityCoeffs:
    """Density of viewing directions mu(R^{-1} x), matching rotate_coeffs.
    The point reflection of a volume leaves the density unchanged."""
    alpha, beta, gamma = _euler(R)
    basis = dc.basis
    Ds = wigner_D_matrices(basis.P, alpha, beta, gamma)
    b = dc.b.copy()
    for p in basis.degrees:
        o = basis.offset[p]
        b[o:o + 2 * p + 1] = Ds[p].conj() @ dc.b[o:o + 2 * p + 1]
    return DensityCoeffs(basis, b)


@dataclass
class Alignment:
    """Best transform x -> R x (after the optional point reflection)."""

    rotation: np.ndarray
    euler: tuple
    reflect: bool
    correlation: float
    meta: dict = field(default_factory=dict)

    def apply(self, vc: VolumeCoeffs) -> VolumeCoeffs:
        v = reflect_coeffs(vc) if self.reflect else vc
        return rotate_coeffs(v, self.euler)

    def apply_density(self, dc: DensityCoeffs) -> DensityCoeffs:
        return rotate_density(dc, self.euler)


def _cross_blocks(cand: VolumeCoeffs, ref: VolumeCoeffs):
    basis = ref.basis
    out = {}
    for l in basis.degrees:
        A = ref.a[basis.block(l)].reshape(2 * l + 1, basis.S[l])
        B = cand.a[basis.block(l)].reshape(2 * l + 1, basis.S[l])
        out[l] = A.conj() @ B.T      # K[m, m'] = sum_s conj(ref_{m,s}) cand_{m',s}
    return out


def _corr(K, euler, L):
    Ds = wigner_D_matrices(L, *euler)
    return float(sum(np.sum(Ds[l] * K[l]).real for l in K))


def align_coeffs(cand: VolumeCoeffs, ref: VolumeCoeffs, step_deg: float = 5.0, reflection: bool = True,
                 refine: bool = True) -> Alignment:
    """Rotation (and reflection) maximizing Re <ref, R cand> / (||ref|| ||cand||)."""
    if cand.basis != ref.basis:
        raise ValueError("coefficients use different bases")
    L = ref.basis.L
    norm = np.linalg.norm(ref.a) * np.linalg.norm(cand.a)
    if norm == 0:
        raise ValueError("zero volume")
    n_ang = int(round(360.0 / step_deg))
    n_beta = int(round(180.0 / step_deg)) + 1
    betas = np.linspace(0, np.pi, n_beta)
    size = max(n_ang, 2 * L + 1)
    best = (-np.inf, None, None)
    options = (False, True) if reflection else (False,)
    for refl in options:
        c = reflect_coeffs(cand) if refl else cand
        K = _cross_blocks(c, ref)
        ds = wigner_d_matrices(L, betas)
        for j, beta in enumerate(betas):
            # C(alpha, gamma) = sum_{m,m'} e^{-i m alpha} e^{-i m' gamma} F[m, m']
            F = np.zeros((size, size), dtype=complex)
            for l in K:
                idx = np.arange(-l, l + 1) % size
                F[np.ix_(idx, idx)] += ds[l][j] * K[l]
            C = np.fft.fft2(F).real
            i, k = np.unravel_index(np.argmax(C), C.shape)
            if C[i, k] > best[0]:
                best = (C[i, k], (2 * np.pi * i / size, beta, 2 * np.pi * k / size), refl)
    val, eul, refl = best
    c = reflect_coeffs(cand) if refl else cand
    K = _cross_blocks(c, ref)
    if refine:
        res = optimize.minimize(lambda e: -_corr(K, e, L), np.array(eul), method="Nelder-Mead",
                                options=dict(xatol=1e-10, fatol=1e-14 * norm, maxiter=4000))
        if -res.fun >= val:
            eul, val = tuple(res.x), -res.fun
    R = euler_to_matrix(*eul)
    return Alignment(R, tuple(float(e) for e in eul), bool(refl), float(val / norm),
                     dict(step_deg=step_deg, refined=refine))


def align(cand: RealVolume, ref: RealVolume, basis: VolumeBasis | None = None, step_deg: float = 5.0,
          reflection: bool = True):
    """Align a volume to a reference on the same grid.

    Both volumes are expanded in ``basis`` (default L=6 on the full grid
    band), the transform is found in coefficient space and the candidate is
    resampled with cubic splines.  Returns (Alignment, aligned RealVolume).
    """
    if cand.data.shape != ref.data.shape:
        raise ValueError("volumes are on different grids")
    n = ref.n
    basis = basis or VolumeBasis(6, n / 4)
    al = align_coeffs(expand(cand, basis), expand(ref, basis), step_deg, reflection)
    data = cand.data[::-1, ::-1, ::-1] if al.reflect else cand.data
    if al.reflect:
        # keep the grid center fixed: index i -> n - i about the center n/2
        data = np.roll(data, 1, axis=(0, 1, 2))
    # output voxel x takes the value at R^{-1} x; arrays are (z, y, x)
    P = np.eye(3)[::-1]
    Rinv = P @ al.rotation.T @ P
    c = np.full(3, n // 2, dtype=float)
    out = ndimage.affine_transform(data, Rinv, offset=c - Rinv @ c, order=3, mode="constant")
    al.meta["real_space_correlation"] = float(np.sum(out * ref.data)) / (
        np.linalg.norm(out) * np.linalg.norm(ref.data) + 1e-300)
    return al, RealVolume(out, cand.voxel_size)


# ----------------------------------------------------------------------------
# Fourier shell correlation
# ----------------------------------------------------------------------------

@dataclass
class FscCurve:
    shells: np.ndarray        # integer shell index k (frequency k / (n voxel))
    values: np.ndarray        # complex correlation per shell
    counts: np.ndarray
    n: int
    voxel_size: float
    cutoff: float = 0.5
    skipped: list = field(default_factory=list)

    @property
    def real(self) -> np.ndarray:
        return self.values.real

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def frequencies(self) -> np.ndarray:
        return self.shells / (self.n * self.voxel_size)

    def cutoff_frequency(self, cutoff: float | None = None) -> float:
        """Frequency of the first shell whose real FSC drops below the
        cutoff; the Nyquist frequency 1/(2 voxel) when none does."""
        cutoff = self.cutoff if cutoff is None else cutoff
        below = np.flatnonzero(self.real < cutoff)
        if len(below) == 0:
            return 1.0 / (2 * self.voxel_size)
        return float(self.frequencies[below[0]])

    def resolution(self, cutoff: float | None = None) -> float:
        f = self.cutoff_frequency(cutoff)
        return np.inf if f == 0 else 1.0 / f

    @property
    def nyquist_value(self) -> float:
        return float(self.real[-1])

    def table(self) -> str:
        lines = ["# shell frequency fsc_real fsc_abs count"]
        for s, f, v, c in zip(self.shells, self.frequencies, self.values, self.counts):
            lines.append(f"{s:d} {f:.6f} {v.real:.6f} {abs(v):.6f} {c:d}")
        return "\n".join(lines) + "\n"


def fsc(v1: RealVolume, v2: RealVolume, cutoff: float = 0.5) -> FscCurve:
    """Correlation over shells k <= |k| < k + 1, k = 0..n/2-1."""
    if v1.data.shape != v2.data.shape:
        raise ValueError("volumes are on different grids")
    n = v1.n
    F1 = _centered_fftn(v1.data)
    F2 = _centered_fftn(v2.data)
    k = np.arange(-n // 2, n // 2)
    KZ, KY, KX = np.meshgrid(k, k, k, indexing="ij")
    shell = np.floor(np.sqrt(KX ** 2 + KY ** 2 + KZ ** 2)).astype(int).ravel()
    keep = shell < n // 2
    shell = shell[keep]
    f1 = F1.ravel()[keep]
    f2 = F2.ravel()[keep]
    nb = n // 2
    num = np.bincount(shell, weights=(f1 * f2.conj()).real, minlength=nb) \
        + 1j * np.bincount(shell, weights=(f1 * f2.conj()).imag, minlength=nb)
    p1 = np.bincount(shell, weights=np.abs(f1) ** 2, minlength=nb)
    p2 = np.bincount(shell, weights=np.abs(f2) ** 2, minlength=nb)
    counts = np.bincount(shell, minlength=nb)
    den = np.sqrt(p1 * p2)
    ok = den > 0
    skipped = [int(s) for s in np.flatnonzero(~ok)]
    vals = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
    shells = np.arange(nb)
    return FscCurve(shells[ok], vals[ok], counts[ok], n, v1.voxel_size, cutoff, skipped)


# ----------------------------------------------------------------------------
# densities
# ----------------------------------------------------------------------------

def _pad_density(dc: DensityCoeffs, P: int) -> np.ndarray:
    basis = DensityBasis(P, False)
    b = np.zeros(basis.size, dtype=complex)
    for (p, u), v in zip(dc.basis.pu, dc.b):
        b[basis.index(p, u)] = v
    return b


def density_error(est: DensityCoeffs, truth: DensityCoeffs, order: int | None = None) -> float:
    """Relative L2 error of the densities on the sphere (quadrature)."""
    P = max(est.P, truth.P)
    rule = sphere_rule(order or 2 * P + 2)
    e = est.values(rule.beta, rule.alpha)
    t = truth.values(rule.beta, rule.alpha)
    den = float(np.sum(rule.weights * t * t))
    if den <= 0:
        raise ZeroDivisionError("reference density is zero")
    return float(np.sqrt(np.sum(rule.weights * (e - t) ** 2) / den))


def density_error_parseval(est: DensityCoeffs, truth: DensityCoeffs) -> float:
    """Same quantity from coefficients: ||mu||^2 = sum |b_{p,u}|^2 4 pi / (2p + 1)."""
    P = max(est.P, truth.P)
    be, bt = _pad_density(est, P), _pad_density(truth, P)
    w = np.array([4 * np.pi / (2 * p + 1) for p, _ in DensityBasis(P, False).pu])
    den = float(np.sum(w * np.abs(bt) ** 2))
    if den <= 0:
        raise ZeroDivisionError("reference density is zero")
    return float(np.sqrt(np.sum(w * np.abs(be - bt) ** 2) / den))
