"""Compressed moments of a noisy image stack, with and without CTFs.

A stack is simulated lazily (images are generated block by block and never
held in memory at once).  Without CTFs the Gaussian sketch path is used;
with defocus groups the CUR path is used.  Each result is checked against
the explicit moment estimators on a random set of frequencies.  Without
debiasing the noise floor inflates the selected ranks and the probe errors.

    python demos/streaming_moments.py
"""
import time

import numpy as np

from submom.forward import CtfSpec, VolumeBasis, random_blob_volume, simulate, vmf_mixture_density
from submom.moments import cur_moments, estimate_moments, probe_error, sample_freq_indices
from submom.tensorkit import SketchConfig

M = 16
N = 20000
SNR = 0.5


def main():
    vb = VolumeBasis(3, M / 2)
    vc = random_blob_volume(vb, seed=1)
    dc = vmf_mixture_density([[0, 0, 1]], [1.0], 2.0, 2)

    stack, _ = simulate(vc, dc, N, M, snr=SNR, seed=0, lazy=True)
    print(f"{N} images of {M}x{M}, noise variance {stack.noise_var:.3e} (SNR {SNR})")
    for debias in (False, True):
        t0 = time.perf_counter()
        sm = estimate_moments(stack, SketchConfig(250, 0, 1e-4, 220), SketchConfig(250, 1, 1e-3, 120), debias=debias)
        pr = probe_error(stack, sm, seed=3, size=32)
        print(f"gaussian path, debias={debias}: ranks {sm.ranks}, probe E2 {pr.E2:.3e} E3 {pr.E3:.3e} "
              f"({time.perf_counter() - t0:.1f}s)")

    ctf_stack, _ = simulate(vc, dc, N, M, sigma2=stack.noise_var, ctf=CtfSpec(4), seed=0, pixel_size=3.0, lazy=True)
    g = ctf_stack.grid
    n = min(120, g.n_active)
    sets = [sample_freq_indices(g, n, [0, k]) for k in (1, 2, 3, 4)]
    t0 = time.perf_counter()
    sm = cur_moments(ctf_stack, *sets, tau2=1e-4, tau3=1e-3, debias=True)
    pr = probe_error(ctf_stack, sm, seed=3, size=32)
    print(f"CUR path with 4 defocus groups: ranks {sm.ranks}, probe E2 {pr.E2:.3e} E3 {pr.E3:.3e}, "
          f"masked entries {sm.meta['masked']} ({time.perf_counter() - t0:.1f}s)")


if __name__ == "__main__":
    np.set_printoptions(precision=3)
    main()
