import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from submom.tensorkit import (
    SketchConfig,
    complex_gaussian,
    cur_matrix,
    energy_rank,
    face_split_apply,
    face_split_matrix,
    lift3,
    mode_contract,
    norm_weighted_sample,
    project3,
    randomized_range,
    refold,
    symmetrize3,
    trim_symmetric_tucker,
    unfold,
)


def rand_tensor(shape, seed=0):
    return complex_gaussian(shape, seed)


def orthonormal(d, r, seed=0):
    Q, _ = np.linalg.qr(complex_gaussian((d, r), seed))
    return Q


def principal_angle(U, V):
    """Sine of the largest principal angle between span(U) and span(V)."""
    R = V - U @ (U.conj().T @ V)
    return float(np.linalg.norm(R, 2))


# mode products and unfoldings ------------------------------------------------

def test_mode_contract_identity():
    M = rand_tensor((2, 2, 2))
    assert np.allclose(mode_contract(M, np.eye(2), 1), M)


def test_mode_contract_all_ones_bruteforce():
    M = np.ones((2, 2, 2))
    U = np.array([[1.0], [1.0]])
    out = mode_contract(M, U, 2)
    ref = np.zeros((2, 1, 2))
    for i in range(2):
        for k in range(2):
            for j in range(2):
                ref[i, 0, k] += M[i, j, k] * U[j, 0]
    assert out.shape == (2, 1, 2)
    assert np.array_equal(out, ref)
    assert np.all(out == 2)


def test_mode_contract_zero_and_shape_error():
    M = rand_tensor((3, 4, 5))
    assert not np.any(mode_contract(M, np.zeros((4, 2)), 2))
    with pytest.raises(ValueError):
        mode_contract(M, np.zeros((3, 2)), 2)
    with pytest.raises(ValueError):
        mode_contract(M, np.zeros((3, 2)), 4)


def test_unfold_index_map_by_hand():
    # entries 1..8 in row-major order: M[i, j, k] = 1 + 4 i + 2 j + k
    M = np.arange(1, 9).reshape(2, 2, 2)
    A = unfold(M, 1)
    # column index (0-based) = j + 2 k for mode 1
    expected = np.array([[1, 3, 2, 4], [5, 7, 6, 8]])
    assert np.array_equal(A, expected)
    # mode 2: column = i + 2 k
    assert np.array_equal(unfold(M, 2), np.array([[1, 5, 2, 6], [3, 7, 4, 8]]))
    # mode 3: column = i + 2 j
    assert np.array_equal(unfold(M, 3), np.array([[1, 5, 3, 7], [2, 6, 4, 8]]))


def test_unfold_invalid_mode():
    with pytest.raises(ValueError):
        unfold(np.zeros((2, 2, 2)), 0)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 10 ** 6))
@settings(max_examples=40, deadline=None)
def test_unfold_refold_roundtrip(d1, d2, d3, k, seed):
    M = rand_tensor((d1, d2, d3), seed)
    assert np.array_equal(refold(unfold(M, k), k, M.shape), M)


def test_symmetric_unfoldings_agree():
    T = symmetrize3(rand_tensor((4, 4, 4), 3))
    assert np.allclose(unfold(T, 1), unfold(T, 2))
    assert np.allclose(unfold(T, 1), unfold(T, 3))


@given(st.integers(2, 6), st.integers(1, 6), st.integers(1, 3), st.integers(0, 10 ** 6))
@settings(max_examples=40, deadline=None)
def test_projection_nonexpansive(d, r, k, seed):
    r = min(r, d)
    M = rand_tensor((d, d, d), seed)
    U = orthonormal(d, r, seed + 1)
    assert np.linalg.norm(mode_contract(M, U.conj(), k)) <= np.linalg.norm(M) * (1 + 1e-12)


def test_tucker_roundtrip_in_span():
    U = orthonormal(7, 3, 1)
    core = rand_tensor((3, 3, 3), 2)
    M = lift3(core, U)
    assert np.allclose(project3(M, U), core, atol=1e-12)
    assert np.linalg.norm(lift3(project3(M, U), U) - M) <= 1e-10 * np.linalg.norm(M)


# randomized range finder -----------------------------------------------------

def test_randomized_range_rank_one():
    u = complex_gaussian(12, 5)
    v = complex_gaussian(12, 6)
    A = np.outer(u, v.conj())
    U, sigma, flagged = randomized_range(lambda S: A @ S, 12, SketchConfig(5, 0, 1e-8))
    assert U.shape[1] == 1 and not flagged
    assert principal_angle(U, (u / np.linalg.norm(u))[:, None]) < 1e-10


def test_randomized_range_zero_and_identity():
    U, _, flagged = randomized_range(lambda S: np.zeros((6, S.shape[1])), 6, SketchConfig(4, 0, 1e-8))
    assert U.shape == (6, 0) and flagged
    U, _, _ = randomized_range(lambda S: S, 10, SketchConfig(10, 0, 1e-12))
    assert U.shape[1] == 10
    assert np.allclose(U.conj().T @ U, np.eye(10), atol=1e-10)


@given(st.integers(1, 6), st.integers(0, 10 ** 6))
@settings(max_examples=25, deadline=None)
def test_randomized_range_exact_rank(rho, seed):
    d = 20
    B = complex_gaussian((d, rho), seed)
    A = B @ B.conj().T
    U, _, _ = randomized_range(lambda S: A @ S, d, SketchConfig(rho + 5, seed, 1e-12))
    Uex = np.linalg.svd(A)[0][:, :rho]
    assert U.shape[1] == rho
    assert principal_angle(U, Uex) <= 1e-8


def test_energy_rank_ties_toward_smaller():
    s = np.array([1.0, 1.0, 0.0])
    assert energy_rank(s, 0.4) == 2
    assert energy_rank(np.array([3.0, 4.0]), 1e-3, r_max=1) == 1
    assert energy_rank(np.zeros(3), 0.1) == 0


def test_sketch_config_validation():
    with pytest.raises(ValueError):
        SketchConfig(0)
    with pytest.raises(ValueError):
        SketchConfig(5, tau=0.0)


# face-splitting product ------------------------------------------------------

def test_face_split_identity_and_basis():
    x, y = complex_gaussian(4, 1), complex_gaussian(4, 2)
    I = np.eye(4)
    assert np.allclose(face_split_apply(I, I, x, y), x * y)
    G1, G2 = complex_gaussian((3, 4), 3), complex_gaussian((3, 4), 4)
    e = np.eye(4)
    assert np.allclose(face_split_apply(G1, G2, e[1], e[2]), G1[:, 1] * G2[:, 2])


@given(st.integers(0, 10 ** 6))
@settings(max_examples=30, deadline=None)
def test_face_split_matches_explicit_matrix(seed):
    G1, G2 = complex_gaussian((3, 4), seed), complex_gaussian((3, 4), seed + 1)
    x, y = complex_gaussian(4, seed + 2), complex_gaussian(4, seed + 3)
    F = face_split_matrix(G1, G2)
    ref = F @ np.kron(x, y)
    got = face_split_apply(G1, G2, x, y)
    assert np.linalg.norm(got - ref) <= 1e-12 * np.linalg.norm(ref)


def test_face_split_shape_error():
    with pytest.raises(ValueError):
        face_split_apply(np.eye(3), np.eye(4), np.ones(3), np.ones(4))


# CUR -------------------------------------------------------------------------

def test_cur_diag_rank3_exact():
    A = np.diag([3.0, 2.0, 1.0, 0.0]).astype(complex)
    f = cur_matrix(lambda J: A[:, J], [0, 1, 2])
    assert f.rank == 3
    assert np.allclose(f.full(), A, atol=1e-12)


def test_cur_rank_one_and_identity():
    u = complex_gaussian(6, 3)
    A = np.outer(u, u.conj())
    f = cur_matrix(lambda J: A[:, J], [2])
    assert np.allclose(f.full(), A, atol=1e-10)
    I = np.eye(5, dtype=complex)
    assert np.allclose(cur_matrix(lambda J: I[:, J], np.arange(5)).full(), I)


def test_cur_singular_w_flagged():
    A = np.zeros((4, 4), dtype=complex)
    f = cur_matrix(lambda J: A[:, J], [0, 1])
    assert f.flagged and f.rank == 0


def test_cur_hermitian_output():
    B = complex_gaussian((10, 4), 7)
    A = B @ B.conj().T
    f = cur_matrix(lambda J: A[:, J], [0, 3, 5, 7, 9])
    F = f.full()
    assert np.linalg.norm(F - F.conj().T) <= 1e-10
    assert np.allclose(f.basis.conj().T @ f.basis, np.eye(f.rank), atol=1e-10)


def test_trim_symmetric_tucker_exact_for_low_rank():
    U = orthonormal(8, 2, 4)
    core = symmetrize3(rand_tensor((2, 2, 2), 5))
    M = lift3(core, U)
    # F = identity-like factor: the tensor itself as Y with F = I
    f = trim_symmetric_tucker(np.eye(8, dtype=complex), M, tau=1e-12)
    assert f.rank == 2
    assert np.linalg.norm(f.full() - M) <= 1e-10 * np.linalg.norm(M)


# sampling --------------------------------------------------------------------

def test_norm_weighted_sample_trivial():
    assert list(norm_weighted_sample([1, 0, 0], 1, 0)) == [0]
    assert sorted(norm_weighted_sample(np.ones(7), 7, 1)) == list(range(7))
    with pytest.raises(ValueError):
        norm_weighted_sample([1, 0], 2, 0)


def test_norm_weighted_sample_monte_carlo():
    rng = np.random.default_rng(0)
    hits = sum(norm_weighted_sample([4.0, 1.0], 1, int(s))[0] == 0 for s in rng.integers(0, 2 ** 63, 20000))
    # 1e5 trials in the stated check; 2e4 keeps the suite fast with the same 0.02 band (5 sigma)
    assert abs(hits / 20000 - 0.8) <= 0.02


@given(st.lists(st.floats(0, 10), min_size=1, max_size=12), st.integers(0, 10 ** 6))
@settings(max_examples=40, deadline=None)
def test_norm_weighted_sample_distinct(w, seed):
    w = np.asarray(w)
    support = int((w > 0).sum())
    if support == 0:
        return
    idx = norm_weighted_sample(w, support, seed)
    assert len(set(idx.tolist())) == support
    assert np.all(w[idx] > 0)
