"""Acceptance criteria, each printed as one PASS/FAIL line.

The end-to-end instance (criteria 2, 3 and 8) takes several minutes on one
core; everything else runs in well under a minute each except the streaming
check (criterion 10), which sketches 1.5e5 images of 64 x 64.
"""
import time
import tracemalloc

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from submom.evaluation import align_coeffs, density_error, fsc, render, volume_fourier_grid
from submom.forward import (
    CtfSpec,
    DensityBasis,
    DensityCoeffs,
    FreqGrid,
    ImageStack,
    LazyImages,
    VolumeBasis,
    VolumeCoeffs,
    random_blob_volume,
    simulate,
    vmf_mixture_density,
)
from submom.moments import (
    cur_moments,
    estimate_moments,
    explicit_moments,
    probe_error,
    project_moments,
    sample_freq_indices,
)
from submom.quadrature import certify, so3_rule
from submom.recon import (
    OptimizerConfig,
    RealParams,
    StageWeights,
    analytic_moments,
    collocation_points,
    cost_grad,
    density_constraints,
    precompute,
    solve_sequential,
    stage_rule,
)
from submom.tensorkit import SketchConfig, unfold


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


# ----------------------------------------------------------------------------
# 1. quadrature exactness
# ----------------------------------------------------------------------------

def test_criterion_1_quadrature_exactness(capsys):
    L, P = 3, 2
    t0 = time.perf_counter()
    rule = so3_rule(3 * L + P)
    err = certify(rule, 3 * L + P)
    el = time.perf_counter() - t0
    ok = err <= 1e-10 and el < 60
    report(capsys, 1, ok, f"so3_rule(11): {rule.size} nodes, worst error {err:.2e} over p <= 11, {el:.1f}s")
    assert ok


# ----------------------------------------------------------------------------
# 2, 3, 8. analytic-moment reconstruction
# ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def analytic_run():
    L, P, m = 3, 2, 32
    vb, db, grid = VolumeBasis(L, m // 2), DensityBasis(P), FreqGrid(m)
    vc = random_blob_volume(vb, seed=1, sigma_range=(0.5, 1.0))
    dc = vmf_mixture_density([[0.3, 0.2, 1], [1, 0, 0]], [0.6, 0.4], 3.0, P)
    stages = {}
    with threadpool_limits(limits=1):
        t0 = time.perf_counter()
        tg = analytic_moments(vc, dc, grid, stage_rule(L, P, 3), SketchConfig(250, 0, 1e-10),
                              SketchConfig(250, 1, 1e-10))
        caches = {k: precompute(stage_rule(L, P, k), tg.U1, tg.U2 if k > 1 else None, tg.U3 if k > 2 else None,
                                grid, vb, db) for k in (1, 2, 3)}
        params, records = solve_sequential(tg, caches, cfg=OptimizerConfig(),
                                           callback=lambda k, p, r: stages.__setitem__(k, p))
        elapsed = time.perf_counter() - t0
    Vt = render(vc, m)
    out = {}
    for k, p in stages.items():
        al = align_coeffs(p.volume(), vc)
        curve = fsc(render(al.apply(p.volume()), m), Vt)
        out[k] = dict(params=p, fsc=curve, density=density_error(al.apply_density(p.density()), dc),
                      correlation=al.correlation)
    return dict(stages=out, records=records, elapsed=elapsed, ranks=tg.ranks, m=m)


def test_criterion_2_analytic_end_to_end(analytic_run, capsys):
    s3 = analytic_run["stages"][3]
    nyq, derr, el = s3["fsc"].nyquist_value, s3["density"], analytic_run["elapsed"]
    ok = nyq >= 0.5 and derr <= 0.1 and el <= 1800
    report(capsys, 2, ok, f"ranks {analytic_run['ranks']}, FSC at Nyquist {nyq:.3f}, density error {derr:.2e}, "
                          f"alignment correlation {s3['correlation']:.4f}, {el:.0f}s single-threaded")
    assert ok


def test_criterion_3_third_moment_necessity(analytic_run, capsys):
    f2 = analytic_run["stages"][2]["fsc"].cutoff_frequency(0.5)
    f3 = analytic_run["stages"][3]["fsc"].cutoff_frequency(0.5)
    ratio = f3 / f2 if f2 > 0 else np.inf
    ok = ratio >= 1.5
    report(capsys, 3, ok, f"FSC=1/2 cutoff frequency stage 2 {f2:.4f}, stage 3 {f3:.4f}, ratio {ratio:.2f}")
    assert ok


def _constraint_summary(params: RealParams, m: int):
    b = params.dbasis.to_complex(params.bt)
    vals, _ = density_constraints(params, collocation_points(322))
    vc = params.volume()
    xi, mask = volume_fourier_grid(m)
    F = np.zeros((m, m, m), dtype=complex)
    F[mask] = vc.basis.evaluate(vc.a, xi[mask])
    V = np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(F), norm="ortho"))
    return b[0], float(vals.min()), float(np.linalg.norm(V.imag) / np.linalg.norm(V))


def test_criterion_8_constraint_satisfaction(analytic_run, capsys):
    outputs = [analytic_run["stages"][k]["params"] for k in (1, 2, 3)]
    # a second instance with a richer, non-symmetric density
    vb, db, grid = VolumeBasis(2, 4), DensityBasis(4, False), FreqGrid(8)
    vc = random_blob_volume(vb, seed=2)
    dc = vmf_mixture_density([[0, 0.4, 1]], [1.0], 4.0, 4, reflection_invariant=False)
    tg = analytic_moments(vc, dc, grid, stage_rule(2, 4, 3), SketchConfig(60, 0, 1e-10), SketchConfig(60, 1, 1e-10))
    caches = {k: precompute(stage_rule(2, 4, k), tg.U1, tg.U2 if k > 1 else None, tg.U3 if k > 2 else None,
                            grid, vb, db) for k in (1, 2, 3)}
    solve_sequential(tg, caches, cfg=OptimizerConfig(maxiter=300),
                     callback=lambda k, p, r: outputs.append(p))
    rows = [_constraint_summary(p, 32 if p.vbasis.A == 16 else 8) for p in outputs]
    ok = all(b0 == 1.0 and vmin >= -1e-6 and imag <= 1e-8 for b0, vmin, imag in rows)
    worst_v = min(r[1] for r in rows)
    worst_i = max(r[2] for r in rows)
    report(capsys, 8, ok, f"{len(rows)} solve outputs: b00 == 1 in all: {all(r[0] == 1.0 for r in rows)}, "
                          f"min collocation density {worst_v:.2e}, max imaginary residue {worst_i:.2e}")
    assert ok


# ----------------------------------------------------------------------------
# 4. sketch fidelity
# ----------------------------------------------------------------------------

def test_criterion_4_sketch_fidelity(capsys):
    vb = VolumeBasis(3, 8)
    vc = random_blob_volume(vb, seed=1)
    dc = vmf_mixture_density([[0.3, 0.2, 1], [1, 0, 0]], [0.6, 0.4], 3.0, 2)
    t0 = time.perf_counter()
    stack, _ = simulate(vc, dc, 500, 16, seed=2)
    tau2, tau3 = 1e-8, 1e-6
    sm = estimate_moments(stack, SketchConfig(250, 0, tau2, 220), SketchConfig(250, 1, tau3, 120))
    _, M2, M3 = explicit_moments(stack)
    U2, U3 = sm.U2, sm.U3
    e2 = np.linalg.norm(U2.conj().T @ M2 @ U2) ** 2 / np.linalg.norm(M2) ** 2
    M31 = unfold(M3, 1)
    e3 = np.linalg.norm(U3.conj().T @ M31) ** 2 / np.linalg.norm(M31) ** 2
    el = time.perf_counter() - t0
    ok = e2 >= 1 - tau2 - 1e-6 and e3 >= 1 - tau3 - 1e-3 and el < 300
    report(capsys, 4, ok, f"ranks {sm.ranks}, uncaptured M2 energy {1 - e2:.2e}, uncaptured M3_[1] energy "
                          f"{1 - e3:.2e}, {el:.1f}s")
    assert ok


# ----------------------------------------------------------------------------
# 5. debiasing
# ----------------------------------------------------------------------------

def test_criterion_5_debias(capsys):
    vb = VolumeBasis(1, 2)
    zero = VolumeCoeffs(vb, np.zeros(vb.size))
    rows = []
    for seed in (0, 1, 2):
        stack, _ = simulate(zero, DensityCoeffs.uniform(0), 100000, 8, sigma2=1.0, seed=seed)
        J = np.flatnonzero(stack.grid.mask)
        U = np.eye(stack.d)[:, J].astype(complex)        # no compression: every active pixel
        raw = project_moments(stack, U, U, U)
        deb = project_moments(stack, U, U, U, debias=True, sigma2=1.0)
        rows.append((np.linalg.norm(deb.m2) / np.linalg.norm(raw.m2),
                     np.linalg.norm(deb.m3) / np.linalg.norm(raw.m3)))
    ok2 = all(r2 <= 0.1 for r2, _ in rows)
    ok3 = all(r3 <= 0.2 for _, r3 in rows)
    ratios = ", ".join(f"({a:.3f}, {b:.3f})" for a, b in rows)
    report(capsys, 5, ok2 and ok3, f"(m2, m3) debiased/undebiased over 3 seeds: {ratios}; m2 clause "
                                   f"{'met' if ok2 else 'missed'}, m3 clause {'met' if ok3 else 'missed'} "
                                   "(pure noise has zero third moment, so the raw m3 is already unbiased)")
    assert ok2 and ok3


# ----------------------------------------------------------------------------
# 6. CUR with CTF
# ----------------------------------------------------------------------------

def test_criterion_6_cur_with_ctf(capsys):
    vb = VolumeBasis(3, 8)
    vc = random_blob_volume(vb, seed=1)
    dc = vmf_mixture_density([[0.3, 0.2, 1], [1, 0, 0]], [0.6, 0.4], 3.0, 2)
    ctf_stack, _ = simulate(vc, dc, 2000, 16, ctf=CtfSpec(4), seed=3, pixel_size=3.0)
    plain, _ = simulate(vc, dc, 2000, 16, seed=3)
    g = plain.grid
    ref = estimate_moments(plain, SketchConfig(250, 0, 1e-8, 220), SketchConfig(250, 1, 1e-6, 120))
    n = min(4 * ref.ranks[1], g.n_active)
    sets = [sample_freq_indices(g, n, [0, k]) for k in (1, 2, 3, 4)]
    sm = cur_moments(ctf_stack, *sets)
    pr = probe_error(ctf_stack, sm, seed=7, size=32)
    nc = cur_moments(plain, *sets)
    rel = np.linalg.norm(nc.lifted_m2() - ref.lifted_m2()) / np.linalg.norm(ref.lifted_m2())
    ok = pr.E2 <= 0.05 and pr.E3 <= 0.15 and rel <= 5e-2
    report(capsys, 6, ok, f"|J| = 4 r2 = {n}, CTF probe E2 {pr.E2:.2e}, E3 {pr.E3:.2e}, masked "
                          f"{sm.meta['masked']}; no-CTF CUR vs Gaussian m2 relative error {rel:.2e}")
    assert ok


# ----------------------------------------------------------------------------
# 7. gradient correctness
# ----------------------------------------------------------------------------

def test_criterion_7_gradient(capsys):
    L, P, m = 2, 2, 16
    vb, db, grid = VolumeBasis(L, m // 2), DensityBasis(P), FreqGrid(m)
    vc = random_blob_volume(vb, seed=1)
    dc = vmf_mixture_density([[0.3, 0.2, 1], [1, 0, 0]], [0.6, 0.4], 3.0, P)
    tg = analytic_moments(vc, dc, grid, stage_rule(L, P, 3), SketchConfig(250, 0, 1e-10), SketchConfig(250, 1, 1e-10))
    caches = {k: precompute(stage_rule(L, P, k), tg.U1, tg.U2 if k > 1 else None, tg.U3 if k > 2 else None,
                            grid, vb, db) for k in (1, 2, 3)}
    W = StageWeights.from_targets(tg)
    rng = np.random.default_rng(0)
    scale = np.linalg.norm(vc.real_params()) / np.sqrt(vb.size)
    worst = 0.0
    for _ in range(5):
        x = np.concatenate([rng.normal(scale=scale, size=vb.size), 0.05 * rng.normal(size=db.n_free)])
        tmpl = RealParams(x[:vb.size], x[vb.size:], vb, db)
        for k in (1, 2, 3):
            _, g = cost_grad(x, caches[k], tg, W, k, tmpl)
            fd = np.empty_like(x)
            for i in range(x.size):
                h = 1e-5 * max(1.0, abs(x[i]))
                e = np.zeros_like(x)
                e[i] = h
                fd[i] = (cost_grad(x + e, caches[k], tg, W, k, tmpl)[0]
                         - cost_grad(x - e, caches[k], tg, W, k, tmpl)[0]) / (2 * h)
            # components that vanish identically are compared against the largest one
            den = np.maximum(np.abs(g), 1e-3 * np.abs(g).max())
            worst = max(worst, float(np.max(np.abs(fd - g) / den)))
    ok = worst <= 1e-6
    report(capsys, 7, ok, f"5 points x 3 stages, {x.size} components, max relative error {worst:.2e}")
    assert ok


# ----------------------------------------------------------------------------
# 9. monotone probe errors
# ----------------------------------------------------------------------------

def test_criterion_9_monotone_probe_errors(capsys):
    vb = VolumeBasis(4, 8)
    vc = random_blob_volume(vb, seed=1)
    dc = vmf_mixture_density([[0.3, 0.2, 1], [1, 0, 0]], [0.6, 0.4], 3.0, 2)
    stack, _ = simulate(vc, dc, 2000, 16, seed=2)
    J = sample_freq_indices(stack.grid, 32, 5)
    rows = []
    for tau in (1e-4, 1e-5, 1e-6, 1e-7):
        sm = estimate_moments(stack, SketchConfig(250, 0, tau, 220), SketchConfig(250, 1, tau, 120))
        pr = probe_error(stack, sm, J)
        rows.append((tau, sm.ranks, pr.E2, pr.E3))
    E2 = np.array([r[2] for r in rows])
    E3 = np.array([r[3] for r in rows])
    ok = bool(np.all(np.diff(E2) <= 0) and np.all(np.diff(E3) <= 0))
    strict = bool(np.all(np.diff(E2) < 0) and np.all(np.diff(E3) < 0))
    detail = "; ".join(f"tau {t:.0e}: r={r[1]},{r[2]} E2 {e2:.2e} E3 {e3:.2e}" for t, r, e2, e3 in rows)
    report(capsys, 9, ok, f"{detail}; strictly decreasing: {strict}")
    assert ok


# ----------------------------------------------------------------------------
# 10. streaming and memory
# ----------------------------------------------------------------------------

def _synthetic_stream(m, n, rank=30, block=256):
    """Lazy stack of low-rank conjugate-symmetric images generated per block."""
    g = FreqGrid(m)
    rng = np.random.default_rng(0)
    B = rng.normal(size=(rank, g.d)) + 1j * rng.normal(size=(rank, g.d))
    B = 0.5 * (B + B[:, g.neg].conj())
    B[:, ~g.mask] = 0
    B /= np.linalg.norm(B, axis=1, keepdims=True)
    decay = np.linspace(3, 0.1, rank)

    def block_fn(b):
        r = np.random.default_rng([7, b])
        rows = min(block, n - b * block)
        return ((r.normal(size=(rows, rank)) * decay) @ B).astype(np.complex64)

    return ImageStack(LazyImages(n, g.d, block, block_fn, np.complex64), m)


def _sketch_run(m, n):
    stack = _synthetic_stream(m, n)
    tracemalloc.start()
    t0 = time.perf_counter()
    sm = estimate_moments(stack, SketchConfig(250, 0, 1e-8, 220), SketchConfig(250, 1, 1e-6, 120), batch=256)
    el = time.perf_counter() - t0
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return el, peak, sm.ranks


def test_criterion_10_streaming(capsys):
    d = 64 * 64
    small_peak = _sketch_run(32, 2000)[1]
    t1, _, _ = _sketch_run(64, 50000)
    t2, peak, ranks = _sketch_run(64, 100000)
    d2_bytes = d * d * 16
    ok = peak < d2_bytes and peak / small_peak < 8 and t2 / t1 <= 2.2
    report(capsys, 10, ok, f"64x64 N=1e5: peak traced memory {peak / 2 ** 20:.0f} MiB vs one d x d complex "
                           f"buffer {d2_bytes / 2 ** 20:.0f} MiB; peak growth d/4 -> d: {peak / small_peak:.1f}x "
                           f"(d^2 scaling would be 16x); time N=5e4 {t1:.0f}s, N=1e5 {t2:.0f}s, "
                           f"ratio {t2 / t1:.2f}; ranks {ranks}")
    assert ok
