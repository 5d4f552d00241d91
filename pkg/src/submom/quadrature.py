"""Quadrature rules on the sphere and on SO(3).

Sphere rules are products of Gauss-Legendre nodes in cos(beta) and the
trapezoid rule in alpha.  SO(3) rules append a trapezoid rule in gamma and
are normalized to the Haar probability measure

    int f dR = 1/(8 pi^2) int f(alpha, beta, gamma) sin(beta) dalpha dbeta dgamma.

A sphere rule of order q integrates every Y_l^m with l <= q exactly.  An SO(3)
rule of order q integrates every D^p_{u,v} with p <= q.  Because the moment
integrands only carry in-plane frequencies up to k*L, the gamma resolution
can be set separately (``gamma_order``), which is how the per-stage rules are
kept small.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .specfun import euler_to_matrix, wigner_D_matrices

__all__ = ["SphereRule", "SO3Rule", "sphere_rule", "so3_rule", "certify", "certify_table", "fibonacci_sphere"]


@dataclass(frozen=True)
class SphereRule:
    beta: np.ndarray      # polar angles
    alpha: np.ndarray     # azimuths
    weights: np.ndarray   # sum to 4 pi
    order: int

    @property
    def size(self) -> int:
        return len(self.weights)

    def points(self) -> np.ndarray:
        sb = np.sin(self.beta)
        return np.stack([sb * np.cos(self.alpha), sb * np.sin(self.alpha), np.cos(self.beta)], -1)


@dataclass(frozen=True)
class SO3Rule:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    weights: np.ndarray   # sum to 1
    order: int            # exactness of the sphere part
    gamma_order: int      # highest in-plane frequency resolved
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def certified_order(self) -> int:
        return min(self.order, self.gamma_order)

    def matrices(self) -> np.ndarray:
        return euler_to_matrix(self.alpha, self.beta, self.gamma)


def sphere_rule(order: int) -> SphereRule:
    """Product rule exact for spherical harmonics of degree <= order."""
    if order < 0:
        raise ValueError("order must be nonnegative")
    n_beta = (order + 2) // 2
    n_alpha = order + 1
    x, wx = np.polynomial.legendre.leggauss(n_beta)
    beta = np.arccos(x)
    alpha = 2 * np.pi * np.arange(n_alpha) / n_alpha
    B, A = np.meshgrid(beta, alpha, indexing="ij")
    W = np.repeat(wx[:, None] * (2 * np.pi / n_alpha), n_alpha, axis=1)
    return SphereRule(B.ravel(), A.ravel(), W.ravel(), order)


def so3_rule(order: int, gamma_order: int | None = None) -> SO3Rule:
    """Haar-normalized product rule on SO(3).

    The sphere part has order ``order``; gamma uses ``gamma_order + 1``
    equispaced nodes (default ``order + 1``).  With the defaults every
    D^p_{u,v}, p <= order, is integrated exactly.
    """
    if gamma_order is None:
        gamma_order = order
    if gamma_order < 0:
        raise ValueError("gamma_order must be nonnegative")
    sph = sphere_rule(order)
    n_gamma = gamma_order + 1
    gamma = 2 * np.pi * np.arange(n_gamma) / n_gamma
    w = np.outer(sph.weights, np.full(n_gamma, 2 * np.pi / n_gamma)) / (8 * np.pi ** 2)
    return SO3Rule(
        alpha=np.repeat(sph.alpha, n_gamma),
        beta=np.repeat(sph.beta, n_gamma),
        gamma=np.tile(gamma, sph.size),
        weights=w.ravel(),
        order=order,
        gamma_order=gamma_order,
    )


def certify_table(rule: SO3Rule, order: int) -> np.ndarray:
    """Per-degree worst deviation: entry p is max_{u,v} |sum_q w_q D^p_{u,v}(R_q) - delta_{p0}|."""
    out = np.zeros(order + 1)
    out[0] = abs(rule.weights.sum() - 1.0)
    if order == 0:
        return out
    Ds = wigner_D_matrices(order, rule.alpha, rule.beta, rule.gamma)
    for p in range(1, order + 1):
        integral = np.einsum("q,quv->uv", rule.weights, Ds[p])
        out[p] = float(np.abs(integral).max())
    return out


def certify(rule: SO3Rule, order: int) -> float:
    """Largest deviation of the rule from the exact integrals of all
    D^p_{u,v} with p <= order (the exact value is 1 for p = 0, else 0)."""
    return float(certify_table(rule, order).max())


def fibonacci_sphere(n: int) -> np.ndarray:
    """n quasi-uniform unit vectors on a golden-angle spiral."""
    if n < 1:
        raise ValueError("need at least one point")
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    phi = np.pi * (1 + 5 ** 0.5) * k
    r = np.sqrt(1 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], -1)
