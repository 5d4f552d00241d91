"""Special functions: spherical Bessel functions and zeros, spherical
harmonics and Wigner d/D matrices.

Conventions
-----------
Spherical harmonics carry the Condon-Shortley phase,

    Y_l^m(theta, phi) = (-1)^m N_l^m P_l^m(cos theta) e^{i m phi},  m >= 0,
    Y_l^{-m} = (-1)^m conj(Y_l^m),

and are orthonormal with respect to sin(theta) dtheta dphi.

Wigner matrices use the ZYZ convention with R = Rz(alpha) Ry(beta) Rz(gamma):

    D^p_{u,v}(alpha, beta, gamma) = e^{-i u alpha} d^p_{u,v}(beta) e^{-i v gamma}

so that D^p_{u,0}(R) = sqrt(4 pi / (2p+1)) conj(Y_p^u(beta, alpha)).

Arrays of harmonics up to degree L are laid out with flat index
``l*l + l + m``; Wigner matrices are indexed ``[u + p, v + p]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import lgamma

import numpy as np
from scipy import optimize, special

__all__ = [
    "sph_bessel",
    "bessel_zeros",
    "SphBesselZeros",
    "sph_harmonic",
    "sph_harmonics_all",
    "lm_index",
    "wigner_d",
    "wigner_d_matrices",
    "wigner_D",
    "wigner_D_matrices",
    "euler_to_matrix",
    "matrix_to_euler",
    "rot_z",
    "rot_y",
    "cart_to_sph",
]


# ----------------------------------------------------------------------------
# spherical Bessel functions
# ----------------------------------------------------------------------------

def _double_factorial_odd(l: int) -> float:
    """(2l+1)!!"""
    return float(np.prod(np.arange(1, 2 * l + 2, 2, dtype=float)))


def sph_bessel(l: int, x):
    """Spherical Bessel function of the first kind j_l(x).

    Small arguments use the leading terms of the power series, elsewhere
    scipy's implementation is used.
    """
    if l < 0:
        raise ValueError("degree must be nonnegative")
    x = np.asarray(x, dtype=float)
    out = special.spherical_jn(l, x)
    small = np.abs(x) < 1e-3 * (l + 1)
    if np.any(small):
        xs = x[small]
        x2 = xs * xs
        series = 1.0 - x2 / (2 * (2 * l + 3)) + x2 * x2 / (8 * (2 * l + 3) * (2 * l + 5))
        out = np.array(out, copy=True)
        out[small] = xs ** l / _double_factorial_odd(l) * series
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class SphBesselZeros:
    """Table of positive zeros rho[l, s-1] of j_l for l = 0..L, s = 1..S."""

    table: np.ndarray

    @property
    def L(self) -> int:
        return self.table.shape[0] - 1

    @property
    def S(self) -> int:
        return self.table.shape[1]

    def __call__(self, l: int, s: int) -> float:
        return float(self.table[l, s - 1])


def bessel_zeros(L: int, S: int) -> SphBesselZeros:
    """First S positive zeros of j_l for every l <= L.

    Zeros of j_{l+1} interlace those of j_l, so each zero of degree l+1 is
    bracketed by two consecutive zeros of degree l and refined with Brent's
    method.
    """
    if L < 0 or S < 1:
        raise ValueError("need L >= 0 and S >= 1")
    n0 = S + L + 1
    prev = np.pi * np.arange(1, n0 + 1, dtype=float)
    table = np.empty((L + 1, S))
    table[0] = prev[:S]
    for l in range(1, L + 1):
        f = lambda t, l=l: special.spherical_jn(l, t)
        cur = np.empty(len(prev) - 1)
        for s in range(len(prev) - 1):
            a, b = prev[s], prev[s + 1]
            if f(a) * f(b) > 0:
                raise RuntimeError(f"interlacing bracket failed at l={l}, s={s + 1}")
            cur[s] = optimize.brentq(f, a, b, xtol=1e-14, rtol=4 * np.finfo(float).eps)
        table[l] = cur[:S]
        prev = cur
    return SphBesselZeros(table)


# ----------------------------------------------------------------------------
# spherical harmonics
# ----------------------------------------------------------------------------

def lm_index(l: int, m: int) -> int:
    return l * l + l + m


def _normalized_legendre(L: int, x: np.ndarray) -> np.ndarray:
    """N_l^m P_l^m(x) without the Condon-Shortley phase, for 0 <= m <= l <= L.

    Returns an array of shape (L+1, L+1) + x.shape indexed [l, m].  The
    recurrences run on the normalized functions so nothing overflows.
    """
    x = np.asarray(x, dtype=float)
    sx = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    out = np.zeros((L + 1, L + 1) + x.shape)
    out[0, 0] = 1.0 / np.sqrt(4 * np.pi)
    for m in range(1, L + 1):
        out[m, m] = np.sqrt((2 * m + 1) / (2.0 * m)) * sx * out[m - 1, m - 1]
    for m in range(0, L):
        out[m + 1, m] = np.sqrt(2 * m + 3.0) * x * out[m, m]
    for m in range(0, L + 1):
        for l in range(m + 2, L + 1):
            a = np.sqrt((4.0 * l * l - 1) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1) ** 2 - 1))
            out[l, m] = a * (x * out[l - 1, m] - b * out[l - 2, m])
    return out


def sph_harmonics_all(L: int, theta, phi) -> np.ndarray:
    """All Y_l^m for l <= L at the given angles.

    Output shape is theta.shape + ((L+1)**2,) with flat index l*l + l + m.
    """
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    theta, phi = np.broadcast_arrays(theta, phi)
    P = _normalized_legendre(L, np.cos(theta))
    out = np.empty(theta.shape + ((L + 1) ** 2,), dtype=complex)
    eim = [np.exp(1j * m * phi) for m in range(L + 1)]
    for l in range(L + 1):
        for m in range(0, l + 1):
            y = (-1) ** m * P[l, m] * eim[m]
            out[..., lm_index(l, m)] = y
            if m:
                out[..., lm_index(l, -m)] = (-1) ** m * np.conj(y)
    return out


def sph_harmonic(l: int, m: int, theta, phi):
    """Single spherical harmonic Y_l^m(theta, phi)."""
    if abs(m) > l:
        raise ValueError("|m| must not exceed l")
    y = sph_harmonics_all(l, theta, phi)[..., lm_index(l, m)]
    return y if np.ndim(y) else complex(y)


# ----------------------------------------------------------------------------
# rotations
# ----------------------------------------------------------------------------

def rot_z(t):
    t = np.asarray(t, dtype=float)
    c, s = np.cos(t), np.sin(t)
    z, o = np.zeros_like(t), np.ones_like(t)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def rot_y(t):
    t = np.asarray(t, dtype=float)
    c, s = np.cos(t), np.sin(t)
    z, o = np.zeros_like(t), np.ones_like(t)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def euler_to_matrix(alpha, beta, gamma) -> np.ndarray:
    """ZYZ Euler angles to rotation matrices, R = Rz(alpha) Ry(beta) Rz(gamma)."""
    return rot_z(alpha) @ rot_y(beta) @ rot_z(gamma)


def matrix_to_euler(R: np.ndarray):
    """Inverse of euler_to_matrix with alpha, gamma in [0, 2pi), beta in [0, pi]."""
    R = np.asarray(R, dtype=float)
    beta = np.arccos(np.clip(R[..., 2, 2], -1.0, 1.0))
    sb = np.sin(beta)
    generic = sb > 1e-12
    alpha = np.where(generic, np.arctan2(R[..., 1, 2], R[..., 0, 2]), np.arctan2(R[..., 1, 0], R[..., 0, 0]))
    gamma = np.where(generic, np.arctan2(R[..., 2, 1], -R[..., 2, 0]), 0.0)
    # at the poles only alpha +/- gamma is defined; put it all in alpha
    flip = (~generic) & (R[..., 2, 2] < 0)
    alpha = np.where(flip, np.arctan2(-R[..., 0, 1], -R[..., 0, 0]), alpha)
    two_pi = 2 * np.pi
    return np.mod(alpha, two_pi), beta, np.mod(gamma, two_pi)


def cart_to_sph(x, y, z):
    """Cartesian to (r, polar, azimuth); the polar angle at the origin is 0."""
    r = np.sqrt(x * x + y * y + z * z)
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.where(r > 0, np.arccos(np.clip(z / np.where(r > 0, r, 1), -1, 1)), 0.0)
    phi = np.arctan2(y, x)
    return r, theta, phi


# ----------------------------------------------------------------------------
# Wigner matrices
# ----------------------------------------------------------------------------

def _d_seed(j: int, mp: int, m: int, beta: np.ndarray) -> np.ndarray:
    """d^j_{mp,m} when j = max(|mp|, |m|); the Wigner sum has a single term."""
    s = max(0, m - mp)
    logc = 0.5 * (lgamma(j + mp + 1) + lgamma(j - mp + 1) + lgamma(j + m + 1) + lgamma(j - m + 1))
    logc -= lgamma(j + m - s + 1) + lgamma(s + 1) + lgamma(mp - m + s + 1) + lgamma(j - mp - s + 1)
    sign = -1.0 if (mp - m + s) % 2 else 1.0
    return sign * np.exp(logc) * np.cos(beta / 2) ** (2 * j + m - mp - 2 * s) * np.sin(beta / 2) ** (mp - m + 2 * s)


def wigner_d_matrices(L: int, beta) -> list[np.ndarray]:
    """Small-d matrices d^p(beta) for p = 0..L.

    Entry [..., u+p, v+p] holds d^p_{u,v}(beta).  Entries are produced by the
    three-term recurrence in p, seeded on the boundary p = max(|u|, |v|).
    """
    beta = np.asarray(beta, dtype=float)
    cb = np.cos(beta)
    out = []
    for p in range(L + 1):
        d = np.zeros(beta.shape + (2 * p + 1, 2 * p + 1))
        for u in range(-p, p + 1):
            for v in range(-p, p + 1):
                if max(abs(u), abs(v)) == p:
                    d[..., u + p, v + p] = _d_seed(p, u, v, beta)
                    continue
                # p > max(|u|, |v|) >= 0, hence p >= 1
                q = p - 1
                c0 = p * (2 * p - 1) / np.sqrt((p * p - u * u) * (p * p - v * v))
                t = cb - (u * v / (p * q) if u * v else 0.0)
                val = t * out[q][..., u + q, v + q]
                if q > max(abs(u), abs(v)):
                    r = q - 1
                    c2 = np.sqrt((q * q - u * u) * (q * q - v * v)) / (q * (2 * p - 1))
                    val = val - c2 * out[r][..., u + r, v + r]
                d[..., u + p, v + p] = c0 * val
        out.append(d)
    return out


def wigner_d(p: int, u: int, v: int, beta):
    """Single small-d entry d^p_{u,v}(beta)."""
    if abs(u) > p or abs(v) > p:
        raise ValueError("|u|, |v| must not exceed p")
    val = wigner_d_matrices(p, beta)[p][..., u + p, v + p]
    return val if np.ndim(val) else float(val)


def wigner_D_matrices(L: int, alpha, beta, gamma) -> list[np.ndarray]:
    """Wigner D matrices D^p(R) for p = 0..L, indexed [..., u+p, v+p]."""
    alpha = np.asarray(alpha, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    ds = wigner_d_matrices(L, beta)
    out = []
    for p, d in enumerate(ds):
        k = np.arange(-p, p + 1)
        ea = np.exp(-1j * alpha[..., None] * k)
        eg = np.exp(-1j * gamma[..., None] * k)
        out.append(ea[..., :, None] * d * eg[..., None, :])
    return out


def wigner_D(p: int, u: int, v: int, alpha, beta, gamma):
    """Single entry D^p_{u,v}(alpha, beta, gamma)."""
    if abs(u) > p or abs(v) > p:
        raise ValueError("|u|, |v| must not exceed p")
    val = np.exp(-1j * u * np.asarray(alpha)) * wigner_d(p, u, v, beta) * np.exp(-1j * v * np.asarray(gamma))
    return val if np.ndim(val) else complex(val)
