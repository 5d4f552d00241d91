"""Basis-expanded forward model and projection simulator.

The Fourier transform of the volume is expanded in spherical Bessel
functions on the ball of radius c = 1/2,

    phi_{l,m,s}(kappa, theta, phi) = C_{l,s} j_l(rho_{l,s} kappa / c) Y_l^m(theta, phi),

and the viewing-direction density in Wigner D functions,

    mu_b(R) = sum_{p,u} b_{p,u} D^p_{u,0}(R).

mu_b is a density with respect to the Haar probability measure, so the
uniform density has b_{0,0} = 1 and mu_b = 1.  The density on the sphere of
viewing directions used by the constraint and sampling code is the same
function of (alpha, beta).

Frequencies are in cycles per pixel.  Images are stored as flattened m*m
vectors in the centered, orthonormal DFT convention.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import special

from .specfun import (
    bessel_zeros,
    cart_to_sph,
    euler_to_matrix,
    lm_index,
    sph_bessel,
    sph_harmonics_all,
)
from .quadrature import sphere_rule

__all__ = [
    "BAND_LIMIT",
    "InvalidDensityError",
    "radial_truncation",
    "VolumeBasis",
    "VolumeCoeffs",
    "DensityBasis",
    "DensityCoeffs",
    "FreqGrid",
    "phi_matrix",
    "psi_row",
    "evaluate_slices",
    "CtfDescriptor",
    "CtfSpec",
    "ctf_eval",
    "electron_wavelength",
    "vmf_density",
    "vmf_mixture_density",
    "blob_volume",
    "random_blob_volume",
    "ImageStack",
    "LazyImages",
    "sample_rotations",
    "simulate",
    "simulated_rotations",
    "calibrate_noise",
    "centered_fft2",
    "centered_ifft2",
]

BAND_LIMIT = 0.5
SIM_BLOCK = 256


class InvalidDensityError(ValueError):
    """The viewing density is negative somewhere it is sampled."""


# ----------------------------------------------------------------------------
# volume basis
# ----------------------------------------------------------------------------

def radial_truncation(L: int, A: float) -> list[int]:
    """Radial counts S(l): the largest s with rho_{l,s+1} / pi <= A."""
    if L < 0 or A <= 0:
        raise ValueError("need L >= 0 and A > 0")
    n = int(np.floor(A)) + 2
    zeros = bessel_zeros(L, n).table
    out = []
    for l in range(L + 1):
        ok = zeros[l] / np.pi <= A * (1 + 1e-12)
        # S(l) = (number of zeros <= pi A) - 1
        out.append(max(int(ok.sum()) - 1, 0))
    return out


def _volume_realness_block(l: int) -> np.ndarray:
    """T with a_m = sum_n T[m, n] at_n for one (l, s) fiber (indices m + l)."""
    T = np.zeros((2 * l + 1, 2 * l + 1), dtype=complex)
    for m in range(-l, l + 1):
        sgn = (-1) ** ((l + m) % 2)
        if m > 0:
            T[m + l, m + l] = 1.0
            T[m + l, -m + l] = -sgn * 1j
        elif m == 0:
            T[l, l] = 1j ** l
        else:
            T[m + l, m + l] = 1j
            T[m + l, -m + l] = sgn
    return T


class VolumeBasis:
    """Index layout and radial functions of the truncated Bessel basis.

    Coefficients are stored degree by degree; inside degree l the entry for
    (m, s) sits at ``offset[l] + (m + l) * S[l] + s - 1``.
    """

    def __init__(self, L: int, A: float):
        self.L = int(L)
        self.A = float(A)
        self.S = radial_truncation(self.L, self.A)
        smax = max(max(self.S), 1)
        self.zeros = bessel_zeros(self.L, smax).table
        self.degrees = [l for l in range(self.L + 1) if self.S[l] > 0]
        self.offset = {}
        n = 0
        for l in self.degrees:
            self.offset[l] = n
            n += (2 * l + 1) * self.S[l]
        self.size = n
        c = BAND_LIMIT
        self.norm = {
            l: 1.0 / np.sqrt(c ** 3 / 2 * sph_bessel(l + 1, self.zeros[l, : self.S[l]]) ** 2)
            for l in self.degrees
        }

    def __eq__(self, other) -> bool:
        return isinstance(other, VolumeBasis) and (self.L, self.A) == (other.L, other.A)

    def __repr__(self) -> str:
        return f"VolumeBasis(L={self.L}, A={self.A}, size={self.size})"

    def index(self, l: int, m: int, s: int) -> int:
        return self.offset[l] + (m + l) * self.S[l] + s - 1

    def block(self, l: int) -> slice:
        return slice(self.offset[l], self.offset[l] + (2 * l + 1) * self.S[l])

    @cached_property
    def lms(self) -> np.ndarray:
        """(size, 3) integer table of (l, m, s)."""
        rows = []
        for l in self.degrees:
            for m in range(-l, l + 1):
                for s in range(1, self.S[l] + 1):
                    rows.append((l, m, s))
        return np.array(rows, dtype=int).reshape(-1, 3)

    def radial(self, l: int, kappa) -> np.ndarray:
        """C_{l,s} j_l(rho_{l,s} kappa / c) for s = 1..S(l); zero for kappa > c."""
        kappa = np.asarray(kappa, dtype=float)
        rho = self.zeros[l, : self.S[l]]
        x = kappa[..., None] * rho / BAND_LIMIT
        out = special.spherical_jn(l, x) * self.norm[l]
        return np.where((kappa <= BAND_LIMIT)[..., None], out, 0.0)

    @cached_property
    def realness_matrix(self) -> np.ndarray:
        """Dense complex J with a = J @ at for real at."""
        J = np.zeros((self.size, self.size), dtype=complex)
        for l in self.degrees:
            T = _volume_realness_block(l)
            S = self.S[l]
            blk = np.kron(T, np.eye(S))
            sl = self.block(l)
            J[sl, sl] = blk
        return J

    def to_complex(self, at: np.ndarray) -> np.ndarray:
        """Lift real parameters to coefficients satisfying the realness condition."""
        at = np.asarray(at, dtype=float)
        out = np.empty(self.size, dtype=complex)
        for l in self.degrees:
            sl = self.block(l)
            T = _volume_realness_block(l)
            out[sl] = (T @ at[sl].reshape(2 * l + 1, self.S[l])).ravel()
        return out

    def to_real(self, a: np.ndarray) -> np.ndarray:
        """Inverse of to_complex (real part of the exact inverse)."""
        a = np.asarray(a, dtype=complex)
        out = np.empty(self.size)
        for l in self.degrees:
            sl = self.block(l)
            T = _volume_realness_block(l)
            out[sl] = np.linalg.solve(T, a[sl].reshape(2 * l + 1, self.S[l])).real.ravel()
        return out

    def realness_residual(self, a: np.ndarray) -> float:
        """max |conj(a_{l,m,s}) (-1)^m - a_{l,-m,s} (-1)^l|."""
        worst = 0.0
        for l in self.degrees:
            A = a[self.block(l)].reshape(2 * l + 1, self.S[l])
            m = np.arange(-l, l + 1)[:, None]
            lhs = np.conj(A) * (-1.0) ** m
            rhs = A[::-1] * (-1.0) ** l
            worst = max(worst, float(np.abs(lhs - rhs).max()))
        return worst

    def evaluate(self, a: np.ndarray, points: np.ndarray) -> np.ndarray:
        """V_hat at Cartesian frequency points (..., 3)."""
        points = np.asarray(points, dtype=float)
        r, th, ph = cart_to_sph(points[..., 0], points[..., 1], points[..., 2])
        Y = sph_harmonics_all(self.L, th, ph)
        out = np.zeros(r.shape, dtype=complex)
        for l in self.degrees:
            Rl = self.radial(l, r)
            Al = a[self.block(l)].reshape(2 * l + 1, self.S[l])
            g = Rl @ Al.T
            out += np.einsum("...m,...m->...", Y[..., l * l:(l + 1) ** 2], g)
        return out

    def design(self, points: np.ndarray) -> np.ndarray:
        """Matrix of basis values, shape points.shape[:-1] + (size,)."""
        points = np.asarray(points, dtype=float)
        r, th, ph = cart_to_sph(points[..., 0], points[..., 1], points[..., 2])
        Y = sph_harmonics_all(self.L, th, ph)
        out = np.empty(r.shape + (self.size,), dtype=complex)
        for l in self.degrees:
            Rl = self.radial(l, r)
            Yl = Y[..., l * l:(l + 1) ** 2]
            out[..., self.block(l)] = (Yl[..., :, None] * Rl[..., None, :]).reshape(r.shape + (-1,))
        return out


@dataclass
class VolumeCoeffs:
    """Coefficients a_{l,m,s} of a band-limited Fourier volume."""

    basis: VolumeBasis
    a: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=complex)
        if self.a.shape != (self.basis.size,):
            raise ValueError(f"expected {self.basis.size} coefficients, got {self.a.shape}")

    @property
    def L(self) -> int:
        return self.basis.L

    @property
    def A(self) -> float:
        return self.basis.A

    @classmethod
    def from_real(cls, basis: VolumeBasis, at: np.ndarray) -> "VolumeCoeffs":
        return cls(basis, basis.to_complex(at))

    def real_params(self) -> np.ndarray:
        return self.basis.to_real(self.a)

    def get(self, l: int, m: int, s: int) -> complex:
        return complex(self.a[self.basis.index(l, m, s)])


# ----------------------------------------------------------------------------
# density basis
# ----------------------------------------------------------------------------

class DensityBasis:
    """Layout of b_{p,u}: degrees 0..P (even only if reflection invariant),
    u = -p..p, flat index offset[p] + u + p.  The real parameter vector
    excludes the fixed b_{0,0} = 1."""

    def __init__(self, P: int, reflection_invariant: bool = True):
        self.P = int(P)
        self.reflection_invariant = bool(reflection_invariant)
        self.degrees = [p for p in range(self.P + 1) if not (self.reflection_invariant and p % 2)]
        self.offset = {}
        n = 0
        for p in self.degrees:
            self.offset[p] = n
            n += 2 * p + 1
        self.size = n
        self.n_free = n - 1

    def __eq__(self, other) -> bool:
        return isinstance(other, DensityBasis) and (self.P, self.reflection_invariant) == (
            other.P, other.reflection_invariant)

    def __repr__(self) -> str:
        return f"DensityBasis(P={self.P}, reflection_invariant={self.reflection_invariant})"

    def index(self, p: int, u: int) -> int:
        return self.offset[p] + u + p

    @cached_property
    def pu(self) -> np.ndarray:
        return np.array([(p, u) for p in self.degrees for u in range(-p, p + 1)], dtype=int).reshape(-1, 2)

    @cached_property
    def realness_matrix(self) -> np.ndarray:
        """(size, n_free) complex J with b = e_00 + J @ bt."""
        J = np.zeros((self.size, self.size), dtype=complex)
        for p in self.degrees:
            o = self.offset[p]
            for u in range(-p, p + 1):
                i = o + u + p
                j = o - u + p
                sgn = (-1) ** (u % 2)
                if u > 0:
                    J[i, i] = 1.0
                    J[i, j] = sgn * 1j
                elif u == 0:
                    J[i, i] = 1.0
                else:
                    J[i, i] = -1j
                    J[i, j] = sgn
        return J[:, 1:]

    def fixed(self) -> np.ndarray:
        b = np.zeros(self.size, dtype=complex)
        b[0] = 1.0
        return b

    def to_complex(self, bt: np.ndarray) -> np.ndarray:
        return self.fixed() + self.realness_matrix @ np.asarray(bt, dtype=float)

    def to_real(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=complex) - self.fixed()
        J = self.realness_matrix
        Jr = np.concatenate([J.real, J.imag])
        rhs = np.concatenate([b.real, b.imag])
        return np.linalg.lstsq(Jr, rhs, rcond=None)[0]

    def design(self, beta, alpha) -> np.ndarray:
        """Rows D^p_{u,0} at viewing directions (beta, alpha), shape (..., size)."""
        Y = sph_harmonics_all(self.P, beta, alpha)
        cols = [np.sqrt(4 * np.pi / (2 * p + 1)) * np.conj(Y[..., lm_index(p, u)])
                for p, u in self.pu]
        return np.stack(cols, -1)


@dataclass
class DensityCoeffs:
    """Coefficients b_{p,u} of the viewing-direction density."""

    basis: DensityBasis
    b: np.ndarray

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=complex)
        if self.b.shape != (self.basis.size,):
            raise ValueError(f"expected {self.basis.size} coefficients, got {self.b.shape}")

    @property
    def P(self) -> int:
        return self.basis.P

    @classmethod
    def uniform(cls, P: int, reflection_invariant: bool = True) -> "DensityCoeffs":
        basis = DensityBasis(P, reflection_invariant)
        return cls(basis, basis.fixed())

    @classmethod
    def from_real(cls, basis: DensityBasis, bt: np.ndarray) -> "DensityCoeffs":
        return cls(basis, basis.to_complex(bt))

    def real_params(self) -> np.ndarray:
        return self.basis.to_real(self.b)

    def values(self, beta, alpha) -> np.ndarray:
        """Density at viewing directions; the imaginary part is dropped."""
        return (self.basis.design(beta, alpha) @ self.b).real

    def values_at(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        _, th, ph = cart_to_sph(points[..., 0], points[..., 1], points[..., 2])
        return self.values(th, ph)

    def realness_residual(self) -> float:
        worst = 0.0
        for p in self.basis.degrees:
            o = self.basis.offset[p]
            v = self.b[o:o + 2 * p + 1]
            u = np.arange(-p, p + 1)
            worst = max(worst, float(np.abs(v - (-1.0) ** u * np.conj(v[::-1])).max()))
        return worst


# ----------------------------------------------------------------------------
# frequency grid and slices
# ----------------------------------------------------------------------------

class FreqGrid:
    """Centered m x m grid of frequencies k/m, k = -m/2..m/2-1, flattened
    row-major with rows indexing xi_y.

    The active set is |xi| <= 1/2 without the unpaired k = -m/2 row and
    column, so it is closed under xi -> -xi.
    """

    def __init__(self, m: int):
        if m < 2 or m % 2:
            raise ValueError("grid size must be even and >= 2")
        self.m = int(m)
        k = np.arange(-m // 2, m // 2)
        KY, KX = np.meshgrid(k, k, indexing="ij")
        self.kx = KX.ravel()
        self.ky = KY.ravel()
        self.xi = np.stack([self.kx, self.ky], -1) / m
        self.radius = np.hypot(self.xi[:, 0], self.xi[:, 1])
        self.mask = (self.radius <= BAND_LIMIT) & (self.kx > -m // 2) & (self.ky > -m // 2)
        self.d = m * m
        # index of -xi (periodic) for every xi
        iy = (self.ky + m // 2)
        ix = (self.kx + m // 2)
        niy = (m - iy) % m
        nix = (m - ix) % m
        self.neg = niy * m + nix
        self.dc = int(np.flatnonzero((self.kx == 0) & (self.ky == 0))[0])

    def __eq__(self, other) -> bool:
        return isinstance(other, FreqGrid) and self.m == other.m

    @property
    def n_active(self) -> int:
        return int(self.mask.sum())

    def slice_points(self, R: np.ndarray) -> np.ndarray:
        """R @ (xi_x, xi_y, 0) for a stack of rotations (..., 3, 3) -> (..., d, 3)."""
        R = np.asarray(R, dtype=float)
        return np.einsum("...ij,nj->...ni", R[..., :, :2], self.xi)


def centered_fft2(x: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DFT with the zero frequency at index m/2."""
    ax = (-2, -1)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=ax), norm="ortho"), axes=ax)


def centered_ifft2(x: np.ndarray) -> np.ndarray:
    ax = (-2, -1)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(x, axes=ax), norm="ortho"), axes=ax)


def _as_matrix(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] == (3, 3):
        return R
    return euler_to_matrix(R[..., 0], R[..., 1], R[..., 2])


def phi_matrix(R, grid: FreqGrid, basis: VolumeBasis) -> np.ndarray:
    """d x |B_V| matrix of basis values at the rotated slice R (xi, 0).

    R is a 3x3 matrix or ZYZ Euler triple.  Rows outside the active mask
    are zero.
    """
    pts = grid.slice_points(_as_matrix(R))
    out = basis.design(pts)
    out[~grid.mask] = 0.0
    return out


def psi_row(R, basis: DensityBasis) -> np.ndarray:
    """Row of D^p_{u,0}(R) for the included (p, u)."""
    M = _as_matrix(R)
    z = M[..., :, 2]
    _, beta, alpha = cart_to_sph(z[..., 0], z[..., 1], z[..., 2])
    return basis.design(beta, alpha)


def evaluate_slices(vc: VolumeCoeffs, grid: FreqGrid, R, chunk: int = 64) -> np.ndarray:
    """Clean Fourier slices Phi[R] a for a stack of rotations, shape (n, d)."""
    R = _as_matrix(R).reshape(-1, 3, 3)
    basis = vc.basis
    idx = np.flatnonzero(grid.mask)
    # radial combinations g_{l,m}(|xi|) = sum_s a_{l,m,s} f_{l,s}(|xi|)
    r = grid.radius[idx]
    g = np.zeros((len(idx), (basis.L + 1) ** 2), dtype=complex)
    for l in basis.degrees:
        Al = vc.a[basis.block(l)].reshape(2 * l + 1, basis.S[l])
        g[:, l * l:(l + 1) ** 2] = basis.radial(l, r) @ Al.T
    out = np.zeros((len(R), grid.d), dtype=complex)
    xi = grid.xi[idx]
    for lo in range(0, len(R), chunk):
        Rc = R[lo:lo + chunk]
        pts = np.einsum("bij,nj->bni", Rc[..., :, :2], xi)
        _, th, ph = cart_to_sph(pts[..., 0], pts[..., 1], pts[..., 2])
        Y = sph_harmonics_all(basis.L, th, ph)
        out[lo:lo + chunk, idx] = np.einsum("bnk,nk->bn", Y, g)
    return out


# ----------------------------------------------------------------------------
# CTF
# ----------------------------------------------------------------------------

def electron_wavelength(voltage_kv: float) -> float:
    """Relativistic electron wavelength in angstrom for an accelerating voltage in kV."""
    V = voltage_kv * 1e3
    h, m0, e, c = 6.62607015e-34, 9.1093837015e-31, 1.602176634e-19, 299792458.0
    lam = h / np.sqrt(2 * m0 * e * V * (1 + e * V / (2 * m0 * c * c)))
    return float(lam * 1e10)


@dataclass(frozen=True)
class CtfDescriptor:
    """Radial CTF parameters; lengths in angstrom."""

    wavelength: float
    defocus: float
    cs: float
    amplitude_contrast: float = 0.1
    b_factor: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.amplitude_contrast <= 1.0:
            raise ValueError("amplitude contrast must lie in [0, 1]")
        if self.b_factor < 0:
            raise ValueError("B-factor must be nonnegative")


def ctf_eval(desc: CtfDescriptor, kappa) -> np.ndarray:
    """sin(-pi lam delta k^2 + pi/2 Cs lam^3 k^4 - alpha) exp(-B k^2 / 4), k in 1/angstrom."""
    k2 = np.asarray(kappa, dtype=float) ** 2
    lam = desc.wavelength
    phase = -np.pi * lam * desc.defocus * k2 + 0.5 * np.pi * desc.cs * lam ** 3 * k2 * k2 - desc.amplitude_contrast
    return np.sin(phase) * np.exp(-desc.b_factor * k2 / 4)


@dataclass(frozen=True)
class CtfSpec:
    """Defocus groups equispaced over [defocus_min, defocus_max] (angstrom)."""

    n_groups: int
    defocus_min: float = 1e4
    defocus_max: float = 3e4
    voltage_kv: float = 300.0
    cs_mm: float = 2.0
    amplitude_contrast: float = 0.1
    b_factor: float = 0.0

    def descriptors(self) -> list[CtfDescriptor]:
        lam = electron_wavelength(self.voltage_kv)
        defs = np.linspace(self.defocus_min, self.defocus_max, self.n_groups) if self.n_groups > 1 else [
            0.5 * (self.defocus_min + self.defocus_max)]
        return [CtfDescriptor(lam, float(df), self.cs_mm * 1e7, self.amplitude_contrast, self.b_factor)
                for df in defs]


# ----------------------------------------------------------------------------
# densities
# ----------------------------------------------------------------------------

def vmf_density(points: np.ndarray, center: np.ndarray, kappa: float) -> np.ndarray:
    """von Mises-Fisher density on the unit sphere w.r.t. surface measure."""
    if kappa <= 0:
        raise ValueError("concentration must be positive")
    center = np.asarray(center, dtype=float)
    center = center / np.linalg.norm(center)
    t = points @ center
    # kappa / (4 pi sinh kappa) e^{kappa t}, written to avoid overflow
    return kappa / (2 * np.pi * (1 - np.exp(-2 * kappa))) * np.exp(kappa * (t - 1))


def vmf_mixture_density(centers, weights, kappa, P: int, reflection_invariant: bool = True,
                        order: int | None = None) -> DensityCoeffs:
    """Project a vMF mixture onto D^p_{u,0}, p <= P.

    With reflection invariance the mixture is averaged with its antipodal
    image, which zeroes the odd degrees.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    weights = np.asarray(weights, dtype=float).ravel()
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), weights.shape)
    if np.any(kappa <= 0):
        raise ValueError("concentration must be positive")
    if np.any(weights <= 0) or abs(weights.sum() - 1) > 1e-8:
        raise ValueError("weights must be positive and sum to one")
    if order is None:
        order = max(2 * P, int(4 * kappa.max()) + 24)
    rule = sphere_rule(order)
    x = rule.points()
    f = sum(w * vmf_density(x, c, k) for c, w, k in zip(centers, weights, kappa))
    if reflection_invariant:
        f = 0.5 * (f + sum(w * vmf_density(-x, c, k) for c, w, k in zip(centers, weights, kappa)))
    basis = DensityBasis(P, reflection_invariant)
    # b_{p,u} = (2p+1) int mu conj(D^p_{u,0}) dR with mu = 4 pi f
    rows = basis.design(rule.beta, rule.alpha)
    scale = np.array([2 * p + 1 for p, _ in basis.pu], dtype=float)
    b = scale * (np.conj(rows).T @ (rule.weights * f))
    b = b / b[0].real
    return DensityCoeffs(basis, b)


# ----------------------------------------------------------------------------
# ground-truth volumes
# ----------------------------------------------------------------------------

def blob_volume(basis: VolumeBasis, centers, sigmas, amplitudes, n_radial: int = 200) -> VolumeCoeffs:
    """L2 projection of a sum of Gaussian blobs onto the basis.

    Uses the plane-wave expansion, so the only numerical integral is the 1-D
    radial one.  Centers and widths are in pixels.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    sigmas = np.broadcast_to(np.asarray(sigmas, dtype=float), (len(centers),))
    amps = np.broadcast_to(np.asarray(amplitudes, dtype=float), (len(centers),))
    x, w = np.polynomial.legendre.leggauss(n_radial)
    kap = 0.5 * BAND_LIMIT * (x + 1)
    w = 0.5 * BAND_LIMIT * w
    r0, th0, ph0 = cart_to_sph(centers[:, 0], centers[:, 1], centers[:, 2])
    Y0 = sph_harmonics_all(basis.L, th0, ph0)
    a = np.zeros(basis.size, dtype=complex)
    for l in basis.degrees:
        f = basis.radial(l, kap)  # (n, S)
        for k in range(len(centers)):
            amp = amps[k] * (2 * np.pi * sigmas[k] ** 2) ** 1.5
            env = np.exp(-2 * np.pi ** 2 * sigmas[k] ** 2 * kap ** 2)
            jl = sph_bessel(l, 2 * np.pi * kap * r0[k])
            rad = (w * env * jl * kap ** 2) @ f  # (S,)
            ang = np.conj(Y0[k, l * l:(l + 1) ** 2])
            blk = 4 * np.pi * (-1j) ** l * amp * np.outer(ang, rad)
            a[basis.block(l)] += blk.ravel()
    return VolumeCoeffs(basis, a)


def random_blob_volume(basis: VolumeBasis, n_blobs: int = 6, seed: int = 0,
                       extent: float = 0.5, sigma_range=(1.5, 3.0)) -> VolumeCoeffs:
    """Seeded blob volume with centers inside extent*A, normalized to unit coefficient norm."""
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n_blobs, 3))
    pts *= (extent * basis.A * rng.uniform(0.3, 1.0, n_blobs) ** (1 / 3) / np.linalg.norm(pts, axis=1))[:, None]
    sig = rng.uniform(*sigma_range, n_blobs)
    amp = rng.uniform(0.5, 1.5, n_blobs)
    vc = blob_volume(basis, pts, sig, amp)
    vc.a /= np.linalg.norm(vc.a)
    return vc


# ----------------------------------------------------------------------------
# image stacks
# ----------------------------------------------------------------------------

class LazyImages:
    """Read-only (N, d) array view whose rows are produced on demand by
    ``block_fn(block_index) -> (rows, d)`` over fixed-size blocks."""

    def __init__(self, n: int, d: int, block: int, block_fn: Callable[[int], np.ndarray], dtype=complex):
        self.shape = (int(n), int(d))
        self.block = int(block)
        self.block_fn = block_fn
        self.dtype = np.dtype(dtype)
        self._cache: tuple[int, np.ndarray] | None = None

    def __len__(self) -> int:
        return self.shape[0]

    def _get_block(self, b: int) -> np.ndarray:
        if self._cache is None or self._cache[0] != b:
            self._cache = (b, self.block_fn(b))
        return self._cache[1]

    def __getitem__(self, key):
        if isinstance(key, (int, np.integer)):
            key = int(key) % self.shape[0]
            return self._get_block(key // self.block)[key % self.block]
        if not isinstance(key, slice):
            raise TypeError("LazyImages supports integer and slice indexing")
        lo, hi, step = key.indices(self.shape[0])
        if step != 1:
            raise TypeError("LazyImages supports unit-stride slices only")
        parts = []
        b = lo // self.block
        while lo < hi:
            blk = self._get_block(b)
            start = lo - b * self.block
            stop = min(hi - b * self.block, len(blk))
            parts.append(blk[start:stop])
            lo = b * self.block + stop
            b += 1
        if not parts:
            return np.zeros((0, self.shape[1]), dtype=self.dtype)
        return np.concatenate(parts) if len(parts) > 1 else parts[0]

    def __array__(self, dtype=None, copy=None):
        out = self[:]
        return out.astype(dtype) if dtype is not None else out


@dataclass
class ImageStack:
    """Fourier-domain images (N, d) on an m x m grid.

    ``groups[j]`` indexes ``ctfs`` for image j; ``ctfs is None`` means no CTF.
    ``images`` may be an ndarray, a memmap or a LazyImages object.
    """

    images: object
    m: int
    noise_var: float = 0.0
    ctfs: list | None = None
    groups: np.ndarray | None = None
    pixel_size: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n, d = self.images.shape
        if d != self.m * self.m:
            raise ValueError(f"images have {d} pixels, expected {self.m}^2")
        if self.ctfs is not None:
            if self.groups is None:
                raise ValueError("CTF descriptors given without group indices")
            self.groups = np.asarray(self.groups, dtype=np.int64)
            if self.groups.shape != (n,):
                raise ValueError("one group index per image is required")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def d(self) -> int:
        return self.m * self.m

    @property
    def has_ctf(self) -> bool:
        return self.ctfs is not None

    @cached_property
    def grid(self) -> FreqGrid:
        return FreqGrid(self.m)

    def ctf_table(self) -> np.ndarray:
        """(G, d) CTF values per group; a single row of ones without CTF."""
        if self.ctfs is None:
            return np.ones((1, self.d))
        kappa = self.grid.radius / self.pixel_size
        return np.stack([ctf_eval(c, kappa) for c in self.ctfs])

    def group_index(self) -> np.ndarray:
        if self.ctfs is None:
            return np.zeros(len(self), dtype=np.int64)
        return self.groups

    def group_counts(self) -> np.ndarray:
        G = 1 if self.ctfs is None else len(self.ctfs)
        return np.bincount(self.group_index(), minlength=G).astype(float)

    def iter_blocks(self, batch: int = 1024) -> Iterator[tuple[int, np.ndarray]]:
        n = len(self)
        for lo in range(0, n, batch):
            yield lo, np.asarray(self.images[lo:min(lo + batch, n)])


# ----------------------------------------------------------------------------
# simulation
# ----------------------------------------------------------------------------

def _envelope(dc: DensityCoeffs, order: int = 64) -> float:
    rule = sphere_rule(max(order, 4 * dc.P))
    vals = dc.values(rule.beta, rule.alpha)
    if vals.min() < 0:
        raise InvalidDensityError(f"viewing density is negative (min {vals.min():.3e}) on the envelope grid")
    return 1.1 * float(vals.max())


def sample_rotations(dc: DensityCoeffs, n: int, rng: np.random.Generator, envelope: float | None = None) -> np.ndarray:
    """ZYZ Euler angles (n, 3) with viewing direction ~ density and uniform gamma."""
    if envelope is None:
        envelope = _envelope(dc)
    out = np.empty((0, 3))
    while len(out) < n:
        k = max(2 * (n - len(out)), 16)
        z = rng.uniform(-1, 1, k)
        alpha = rng.uniform(0, 2 * np.pi, k)
        beta = np.arccos(z)
        acc = rng.uniform(0, envelope, k) < dc.values(beta, alpha)
        gamma = rng.uniform(0, 2 * np.pi, int(acc.sum()))
        out = np.concatenate([out, np.stack([alpha[acc], beta[acc], gamma], -1)])
    return out[:n]


def _noise(shape, sigma2: float, m: int, rng: np.random.Generator) -> np.ndarray:
    """Real-space white noise mapped through the orthonormal centered DFT."""
    eps = rng.normal(scale=np.sqrt(sigma2), size=shape + (m, m))
    return centered_fft2(eps).reshape(shape + (m * m,))


def calibrate_noise(vc: VolumeCoeffs, dc: DensityCoeffs, snr: float, m: int, ctf: CtfSpec | None = None,
                    pixel_size: float = 1.0, n: int = 1000, seed: int = 0) -> float:
    """sigma^2 = sum ||I0||^2 / (snr * sum ||eps||^2) over n clean projections
    and unit-variance noise draws."""
    if snr <= 0:
        raise ValueError("SNR must be positive")
    rng = np.random.default_rng([seed, 0x5A5A])
    grid = FreqGrid(m)
    rots = sample_rotations(dc, n, rng)
    clean = evaluate_slices(vc, grid, rots)
    if ctf is not None:
        H = np.stack([ctf_eval(c, grid.radius / pixel_size) for c in ctf.descriptors()])
        clean = clean * H[np.arange(n) % len(H)]
    eps = _noise((n,), 1.0, m, rng)
    return float(np.sum(np.abs(clean) ** 2) / (snr * np.sum(np.abs(eps) ** 2)))


def simulate(vc: VolumeCoeffs, dc: DensityCoeffs, N: int, m: int | None = None, sigma2: float = 0.0,
             snr: float | None = None, ctf: CtfSpec | None = None, shift_sigma: float = 0.0,
             seed: int = 0, pixel_size: float = 1.0, lazy: bool = False,
             dtype=np.complex128) -> tuple[ImageStack, np.ndarray | None]:
    """Simulate N noisy projection images.

    Rotations are drawn block by block from streams seeded by (seed, block),
    so the output does not depend on how it is consumed.  With ``snr`` the
    noise variance is calibrated first.  Returns the stack and the Euler
    angles (None when lazy).
    """
    if N < 1:
        raise ValueError("N must be positive")
    if m is None:
        m = int(round(2 * vc.A))
    grid = FreqGrid(m)
    env = _envelope(dc)
    if snr is not None:
        sigma2 = calibrate_noise(vc, dc, snr, m, ctf, pixel_size, seed=seed)
    descs = ctf.descriptors() if ctf is not None else None
    H = None
    if descs is not None:
        H = np.stack([ctf_eval(c, grid.radius / pixel_size) for c in descs])
    G = len(descs) if descs else 1
    groups = np.arange(N) % G

    def make_block(b: int, with_rot: bool = False):
        lo, hi = b * SIM_BLOCK, min((b + 1) * SIM_BLOCK, N)
        rng = np.random.default_rng([seed, b])
        rots = sample_rotations(dc, hi - lo, rng, env)
        img = evaluate_slices(vc, grid, rots)
        if H is not None:
            img *= H[groups[lo:hi]]
        if shift_sigma > 0:
            t = rng.normal(scale=shift_sigma, size=(hi - lo, 2))
            img *= np.exp(-2j * np.pi * (t @ grid.xi.T))
        if sigma2 > 0:
            img += _noise((hi - lo,), sigma2, m, rng)
        img = img.astype(dtype, copy=False)
        return (img, rots) if with_rot else img

    n_blocks = -(-N // SIM_BLOCK)
    meta = dict(seed=seed, sigma2=sigma2, snr=snr, shift_sigma=shift_sigma)
    if lazy:
        images = LazyImages(N, m * m, SIM_BLOCK, make_block, dtype)
        rots = None
    else:
        parts = [make_block(b, True) for b in range(n_blocks)]
        images = np.concatenate([p[0] for p in parts])
        rots = np.concatenate([p[1] for p in parts])
    stack = ImageStack(images, m, noise_var=float(sigma2), ctfs=descs,
                       groups=groups if descs else None, pixel_size=pixel_size, meta=meta)
    return stack, rots


def simulated_rotations(dc: DensityCoeffs, N: int, seed: int = 0) -> np.ndarray:
    """The Euler angles ``simulate`` draws for the same density, N and seed."""
    env = _envelope(dc)
    parts = []
    for b in range(-(-N // SIM_BLOCK)):
        lo, hi = b * SIM_BLOCK, min((b + 1) * SIM_BLOCK, N)
        parts.append(sample_rotations(dc, hi - lo, np.random.default_rng([seed, b]), env))
    return np.concatenate(parts)
