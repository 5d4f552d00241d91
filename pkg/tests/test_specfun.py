from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from submom.specfun import (
    bessel_zeros,
    euler_to_matrix,
    matrix_to_euler,
    sph_bessel,
    sph_harmonic,
    sph_harmonics_all,
    lm_index,
    wigner_D,
    wigner_D_matrices,
    wigner_d,
    wigner_d_matrices,
    cart_to_sph,
)

RHO_11 = 4.493409457909064  # first positive root of tan x = x


def d_factorial(p, u, v, beta):
    """Wigner's explicit sum for d^p_{u,v}(beta)."""
    c, s = np.cos(beta / 2), np.sin(beta / 2)
    pref = np.sqrt(float(factorial(p + u) * factorial(p - u) * factorial(p + v) * factorial(p - v)))
    out = 0.0
    for k in range(max(0, v - u), min(p + v, p - u) + 1):
        den = factorial(p + v - k) * factorial(k) * factorial(u - v + k) * factorial(p - u - k)
        out += (-1) ** (u - v + k) * c ** (2 * p + v - u - 2 * k) * s ** (u - v + 2 * k) / den
    return pref * out


def bisect(f, a, b, tol=1e-15):
    fa = f(a)
    for _ in range(200):
        c = 0.5 * (a + b)
        fc = f(c)
        if fa * fc <= 0:
            b = c
        else:
            a, fa = c, fc
        if b - a < tol:
            break
    return 0.5 * (a + b)


# spherical Bessel ------------------------------------------------------------

def test_j0_closed_form_and_limits():
    x = np.linspace(0.1, 20, 50)
    assert np.allclose(sph_bessel(0, x), np.sin(x) / x, atol=1e-14)
    assert abs(sph_bessel(0, np.pi)) < 1e-15
    assert sph_bessel(0, 0.0) == 1.0
    for l in range(1, 6):
        assert sph_bessel(l, 0.0) == 0.0


def test_j1_first_zero_by_bisection():
    j1 = lambda x: np.sin(x) / x ** 2 - np.cos(x) / x
    root = bisect(j1, 4.0, 5.0)
    assert abs(root - RHO_11) < 1e-12
    assert abs(sph_bessel(1, root)) < 1e-12


def test_small_argument_series_continuity():
    for l in range(5):
        x = 1e-3 * (l + 1)
        assert np.isclose(sph_bessel(l, x * (1 - 1e-9)), sph_bessel(l, x * (1 + 1e-9)), rtol=1e-7)


def test_bessel_zeros_table():
    z = bessel_zeros(6, 8)
    assert np.allclose(z.table[0], np.pi * np.arange(1, 9), atol=1e-13)
    assert abs(z(1, 1) - RHO_11) < 1e-12
    for l in range(7):
        assert np.all(np.diff(z.table[l]) > 0)
        assert np.all(np.abs(sph_bessel(l, z.table[l])) <= 1e-12)
    for l in range(6):
        # interlacing rho_{l,s} < rho_{l+1,s} < rho_{l,s+1}
        assert np.all(z.table[l, :] < z.table[l + 1, :])
        assert np.all(z.table[l + 1, :-1] < z.table[l, 1:])


# spherical harmonics ---------------------------------------------------------

def test_y00_constant():
    th, ph = np.random.default_rng(0).uniform(0, np.pi, 20), np.random.default_rng(1).uniform(0, 2 * np.pi, 20)
    assert np.allclose(sph_harmonic(0, 0, th, ph), 1 / np.sqrt(4 * np.pi))


def test_sph_harmonic_normalization_by_quadrature():
    x, w = np.polynomial.legendre.leggauss(20)
    th = np.arccos(x)
    ph = 2 * np.pi * np.arange(40) / 40
    T, P = np.meshgrid(th, ph, indexing="ij")
    W = w[:, None] * (2 * np.pi / 40)
    for l in range(5):
        for m in range(-l, l + 1):
            Y = sph_harmonic(l, m, T, P)
            assert abs(np.sum(W * np.abs(Y) ** 2) - 1) < 1e-12


@given(st.integers(0, 6), st.data())
@settings(max_examples=30, deadline=None)
def test_conjugation_symmetry(l, data):
    m = data.draw(st.integers(-l, l))
    th = data.draw(st.floats(0, np.pi))
    ph = data.draw(st.floats(0, 2 * np.pi))
    assert np.isclose(sph_harmonic(l, -m, th, ph), (-1) ** m * np.conj(sph_harmonic(l, m, th, ph)), atol=1e-13)


def test_condon_shortley_y11():
    th, ph = 0.7, 1.3
    ref = -np.sqrt(3 / (8 * np.pi)) * np.sin(th) * np.exp(1j * ph)
    assert np.isclose(sph_harmonic(1, 1, th, ph), ref, atol=1e-14)


def test_harmonics_all_layout():
    Y = sph_harmonics_all(3, 0.4, 2.0)
    for l in range(4):
        for m in range(-l, l + 1):
            assert np.isclose(Y[..., lm_index(l, m)], sph_harmonic(l, m, 0.4, 2.0))


# Wigner matrices -------------------------------------------------------------

@given(st.integers(0, 8), st.floats(0, np.pi), st.data())
@settings(max_examples=60, deadline=None)
def test_small_d_matches_factorial_formula(p, beta, data):
    u = data.draw(st.integers(-p, p))
    v = data.draw(st.integers(-p, p))
    assert abs(wigner_d(p, u, v, beta) - d_factorial(p, u, v, beta)) < 1e-10


def test_small_d_identity_at_zero():
    for p, d in enumerate(wigner_d_matrices(10, 0.0)):
        assert np.allclose(d, np.eye(2 * p + 1), atol=1e-14)


def test_D000_is_one():
    rng = np.random.default_rng(2)
    a, b, g = rng.uniform(0, 2 * np.pi, 10), rng.uniform(0, np.pi, 10), rng.uniform(0, 2 * np.pi, 10)
    assert np.allclose(wigner_D(0, 0, 0, a, b, g), 1.0)


def test_D_column_zero_is_harmonic():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b, g = rng.uniform(0, 2 * np.pi), rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
        for p in range(5):
            for u in range(-p, p + 1):
                lhs = wigner_D(p, u, 0, a, b, g)
                rhs = np.sqrt(4 * np.pi / (2 * p + 1)) * np.conj(sph_harmonic(p, u, b, a))
                assert abs(lhs - rhs) < 1e-10


def test_D_unitary_at_random_rotations():
    rng = np.random.default_rng(4)
    a, b, g = rng.uniform(0, 2 * np.pi, 100), rng.uniform(0, np.pi, 100), rng.uniform(0, 2 * np.pi, 100)
    for p, D in enumerate(wigner_D_matrices(8, a, b, g)):
        prod = np.einsum("qij,qkj->qik", D, D.conj())
        assert np.abs(prod - np.eye(2 * p + 1)).max() < 1e-10


def test_schur_orthogonality_dense_quadrature():
    # Gauss-Legendre in cos(beta) x trapezoid in alpha, gamma, exact for degree <= 6 products
    n = 8
    x, w = np.polynomial.legendre.leggauss(n)
    ang = 2 * np.pi * np.arange(2 * n) / (2 * n)
    A, B, G = np.meshgrid(ang, np.arccos(x), ang, indexing="ij")
    W = np.broadcast_to(w[None, :, None], A.shape) / (2 * (2 * n) ** 2)
    Ds = wigner_D_matrices(3, A.ravel(), B.ravel(), G.ravel())
    Wf = W.ravel()
    for p in range(4):
        for q in range(4):
            G_ = np.einsum("n,nab,ncd->abcd", Wf, Ds[p], Ds[q].conj())
            if p == q:
                ref = np.einsum("ac,bd->abcd", np.eye(2 * p + 1), np.eye(2 * p + 1)) / (2 * p + 1)
            else:
                ref = 0.0
            assert np.abs(G_ - ref).max() < 1e-12


def test_harmonic_rotation_via_D():
    # Y_l^m(R^T x) = sum_m' D^l_{m,m'}(R) ... checked against direct evaluation
    rng = np.random.default_rng(5)
    a, b, g = 0.4, 1.1, 2.3
    R = euler_to_matrix(a, b, g)
    pts = rng.normal(size=(30, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    rp = pts @ R.T
    _, th, ph = cart_to_sph(*pts.T)
    _, thr, phr = cart_to_sph(*rp.T)
    Ds = wigner_D_matrices(4, a, b, g)
    for l in range(5):
        Yx = np.stack([sph_harmonic(l, m, th, ph) for m in range(-l, l + 1)], -1)
        YRx = np.stack([sph_harmonic(l, m, thr, phr) for m in range(-l, l + 1)], -1)
        assert np.abs(YRx - Yx @ Ds[l].conj().T).max() < 1e-9


def test_euler_roundtrip():
    rng = np.random.default_rng(6)
    a, b, g = rng.uniform(0, 2 * np.pi, 50), rng.uniform(0.01, np.pi - 0.01, 50), rng.uniform(0, 2 * np.pi, 50)
    R = euler_to_matrix(a, b, g)
    a2, b2, g2 = matrix_to_euler(R)
    assert np.allclose(euler_to_matrix(a2, b2, g2), R, atol=1e-12)
    assert np.allclose(np.einsum("nij,nkj->nik", R, R), np.eye(3), atol=1e-13)


def test_invalid_degree():
    with pytest.raises(ValueError):
        sph_bessel(-1, 1.0)
