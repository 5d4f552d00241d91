"""Command-line pipeline: simulate | sketch | reconstruct | evaluate | quadrature-check.

Configuration is a TOML (or JSON) file with the sections below; every key
can be overridden with ``--set section.key=value`` (value parsed as TOML).

    [grid]        m (required), pixel_size
    [volume]      L (required), A, n_blobs, seed, extent, sigma_min, sigma_max
    [density]     P (required), reflection_invariant, kappa, centers, weights, b_real
    [simulate]    N (required by simulate), sigma2, snr, seed, shift_sigma, precision
    [ctf]         n_groups (0 = no CTF), defocus_min, defocus_max, voltage_kv, cs_mm,
                  amplitude_contrast, b_factor
    [sketch]      path (auto|gaussian|cur), s, seed, tau2, tau3, r2_max, r3_max, batch,
                  debias, cur_eps, cur_columns, cur_fibers, probe_size, probe_seed
    [quadrature]  orders, gamma_orders (per stage; empty = exact rule)
    [optimizer]   ftol, maxiter, collocation, seed, init_kappa, init_modes, init_norm,
                  init_scale, gauge, gauge_rtol, cost_scale, single_precision,
                  memory_budget_gb
    [evaluate]    cutoff, n, step_deg, reflection

Exit codes: 0 success, 2 invalid configuration or density, 3 container
checksum or format failure, 4 optimizer failure, 5 grid mismatch.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import store
from .container import ContainerError
from .evaluation import align_coeffs, density_error, fsc, render
from .forward import (
    CtfSpec,
    DensityBasis,
    DensityCoeffs,
    FreqGrid,
    InvalidDensityError,
    VolumeBasis,
    random_blob_volume,
    simulate,
    simulated_rotations,
    vmf_mixture_density,
)
from .moments import cur_moments, estimate_moments, probe_error, sample_freq_indices
from .quadrature import certify_table, so3_rule
from .recon import (
    MemoryBudgetError,
    OptimizerConfig,
    OptimizerError,
    precompute,
    solve_sequential,
    stage_rule,
)
from .tensorkit import SketchConfig

__all__ = ["main", "load_config", "ConfigError", "GridMismatchError", "DEFAULTS", "REQUIRED", "THREADS_ENV"]

log = logging.getLogger("submom")

THREADS_ENV = "SUBMOM_THREADS"

DEFAULTS = {
    "grid": {"m": None, "pixel_size": 1.0},
    "volume": {"L": None, "A": None, "n_blobs": 6, "seed": 1, "extent": 0.5, "sigma_min": 1.5, "sigma_max": 3.0},
    "density": {"P": None, "reflection_invariant": True, "kappa": 3.0, "centers": [[0.0, 0.0, 1.0]],
                "weights": [1.0], "b_real": None},
    "simulate": {"N": None, "sigma2": 0.0, "snr": None, "seed": 0, "shift_sigma": 0.0, "precision": "double"},
    "ctf": {"n_groups": 0, "defocus_min": 1e4, "defocus_max": 3e4, "voltage_kv": 300.0, "cs_mm": 2.0,
            "amplitude_contrast": 0.1, "b_factor": 0.0},
    "sketch": {"path": "auto", "s": 250, "seed": 0, "tau2": 1e-8, "tau3": 1e-6, "r2_max": 220, "r3_max": 120,
               "batch": 1024, "debias": True, "cur_eps": 1e-5, "cur_columns": 400, "cur_fibers": 120,
               "probe_size": 32, "probe_seed": 0},
    "quadrature": {"orders": [], "gamma_orders": []},
    "optimizer": {"ftol": 1e-8, "maxiter": 1000, "collocation": 322, "seed": 0, "init_kappa": 2.0,
                  "init_modes": 3, "init_norm": "m2", "init_scale": 1.0, "gauge": True,
                  "gauge_rtol": 1e-6, "cost_scale": [1.0, 1.0, 1e4],
                  "single_precision": False, "memory_budget_gb": 4.0},
    "evaluate": {"cutoff": 0.5, "n": None, "step_deg": 5.0, "reflection": True},
}

# keys that must be present, per command
REQUIRED = {
    "simulate": ["grid.m", "volume.L", "density.P", "simulate.N"],
    "sketch": [],
    "reconstruct": ["grid.m", "volume.L", "density.P"],
    "evaluate": [],
}


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


class GridMismatchError(ValueError):
    """Inputs defined on incompatible grids or bases."""


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the file, then ``section.key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    user = {}
    if path is not None:
        path = Path(path)
        try:
            raw = path.read_bytes()
            user = json.loads(raw) if path.suffix == ".json" else tomllib.loads(raw.decode("utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for item in overrides:
        key, sep, val = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        sec, name = key.split(".", 1)
        user.setdefault(sec, {})[name] = _parse_value(val)
    for sec, vals in user.items():
        if sec not in cfg or not isinstance(vals, dict):
            raise ConfigError(f"unknown config section {sec!r}")
        for k, v in vals.items():
            if k not in cfg[sec]:
                raise ConfigError(f"unknown config key {sec}.{k}")
            cfg[sec][k] = v
    return cfg


def require(cfg: dict, keys) -> None:
    for key in keys:
        sec, name = key.split(".")
        if cfg[sec][name] is None:
            raise ConfigError(f"missing config key {key}")


def validate(cfg: dict) -> None:
    """Range checks on everything that is set."""
    def check(cond, msg):
        if not cond:
            raise ConfigError(msg)

    g, v, d, s, o = cfg["grid"], cfg["volume"], cfg["density"], cfg["sketch"], cfg["optimizer"]
    if g["m"] is not None:
        check(isinstance(g["m"], int) and g["m"] >= 2 and g["m"] % 2 == 0, "grid.m must be an even integer >= 2")
    check(g["pixel_size"] > 0, "grid.pixel_size must be positive")
    if v["L"] is not None:
        check(isinstance(v["L"], int) and v["L"] >= 0, "volume.L must be a nonnegative integer")
    if v["A"] is not None:
        check(v["A"] > 0, "volume.A must be positive")
    if d["P"] is not None:
        check(isinstance(d["P"], int) and d["P"] >= 0, "density.P must be a nonnegative integer")
    check(len(d["centers"]) == len(d["weights"]) and len(d["weights"]) > 0,
          "density.centers and density.weights must have the same nonzero length")
    sim = cfg["simulate"]
    if sim["N"] is not None:
        check(isinstance(sim["N"], int) and sim["N"] >= 1, "simulate.N must be a positive integer")
    check(sim["sigma2"] >= 0, "simulate.sigma2 must be nonnegative")
    check(sim["snr"] is None or sim["snr"] > 0, "simulate.snr must be positive")
    check(sim["precision"] in ("single", "double"), "simulate.precision must be single or double")
    check(cfg["ctf"]["n_groups"] >= 0, "ctf.n_groups must be nonnegative")
    check(s["path"] in ("auto", "gaussian", "cur"), "sketch.path must be auto, gaussian or cur")
    check(s["s"] >= 1, "sketch.s must be positive")
    check(0 < s["tau2"] < 1 and 0 < s["tau3"] < 1, "sketch.tau2 and sketch.tau3 must lie in (0, 1)")
    check(s["batch"] >= 1, "sketch.batch must be positive")
    check(o["ftol"] > 0 and o["maxiter"] >= 1, "optimizer.ftol and optimizer.maxiter must be positive")
    check(o["collocation"] >= 1, "optimizer.collocation must be positive")
    check(0 < cfg["evaluate"]["cutoff"] < 1, "evaluate.cutoff must lie in (0, 1)")


def _bases(cfg: dict):
    m = cfg["grid"]["m"]
    A = cfg["volume"]["A"] if cfg["volume"]["A"] is not None else m / 2
    return VolumeBasis(cfg["volume"]["L"], A), DensityBasis(cfg["density"]["P"], cfg["density"]["reflection_invariant"])


def _density(cfg: dict, db: DensityBasis) -> DensityCoeffs:
    d = cfg["density"]
    if d["b_real"] is not None:
        bt = np.asarray(d["b_real"], dtype=float)
        if bt.shape != (db.n_free,):
            raise ConfigError(f"density.b_real needs {db.n_free} entries")
        return DensityCoeffs.from_real(db, bt)
    return vmf_mixture_density(d["centers"], d["weights"], d["kappa"], db.P, db.reflection_invariant)


def _ctf(cfg: dict):
    c = dict(cfg["ctf"])
    n = c.pop("n_groups")
    return CtfSpec(int(n), **c) if n > 0 else None


def _optimizer_config(cfg: dict) -> OptimizerConfig:
    o = cfg["optimizer"]
    keys = ("ftol", "maxiter", "collocation", "seed", "init_kappa", "init_modes", "init_norm", "init_scale",
            "gauge", "gauge_rtol", "cost_scale")
    try:
        return OptimizerConfig(**{k: o[k] for k in keys})
    except ValueError as exc:
        raise ConfigError(f"optimizer: {exc}") from None


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_simulate(cfg: dict, out, truth=None) -> None:
    require(cfg, REQUIRED["simulate"])
    vb, db = _bases(cfg)
    v, sim = cfg["volume"], cfg["simulate"]
    vc = random_blob_volume(vb, v["n_blobs"], v["seed"], v["extent"], (v["sigma_min"], v["sigma_max"]))
    dc = _density(cfg, db)
    ctf = _ctf(cfg)
    dtype = np.complex64 if sim["precision"] == "single" else np.complex128
    t0 = time.perf_counter()
    stack, _ = simulate(vc, dc, sim["N"], cfg["grid"]["m"], sim["sigma2"], sim["snr"], ctf, sim["shift_sigma"],
                        sim["seed"], cfg["grid"]["pixel_size"], lazy=True, dtype=dtype)
    store.save_stack(out, stack)
    log.info("simulated %d images (m=%d, sigma2=%.6g, ctf groups=%d) in %.1fs", len(stack), stack.m,
             stack.noise_var, 0 if ctf is None else ctf.n_groups, time.perf_counter() - t0)
    truth = truth or _sidecar(out)
    rots = simulated_rotations(dc, sim["N"], sim["seed"])
    store.save_truth(truth, vc, dc, rots, dict(seed=sim["seed"], sigma2=stack.noise_var, m=stack.m))
    log.info("wrote %s and ground truth %s", out, truth)


def _sidecar(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + ".truth" + out.suffix)


def cmd_sketch(cfg: dict, stack_path, out) -> None:
    stack = store.load_stack(stack_path)
    s = cfg["sketch"]
    if cfg["grid"]["m"] is not None and cfg["grid"]["m"] != stack.m:
        raise GridMismatchError(f"stack has m={stack.m}, config has grid.m={cfg['grid']['m']}")
    path = s["path"]
    if path == "auto":
        path = "cur" if stack.has_ctf else "gaussian"
    if path == "gaussian" and stack.has_ctf:
        raise ConfigError("the Gaussian sketch path cannot handle CTFs; use sketch.path = \"cur\"")
    log.info("sketch path: %s (%s)", path, "CTF present" if stack.has_ctf else "no CTF")
    sigma2 = stack.noise_var
    t0 = time.perf_counter()
    if path == "gaussian":
        cfg2 = SketchConfig(s["s"], s["seed"], s["tau2"], s["r2_max"])
        cfg3 = SketchConfig(s["s"], s["seed"] + 1, s["tau3"], s["r3_max"])
        sm = estimate_moments(stack, cfg2, cfg3, s["debias"], sigma2, s["batch"])
    else:
        g = stack.grid
        nc = min(s["cur_columns"], g.n_active)
        nf = min(s["cur_fibers"], g.n_active)
        seed = s["seed"]
        J = sample_freq_indices(g, nc, [seed, 1])
        S = sample_freq_indices(g, nc, [seed, 2])
        J1 = sample_freq_indices(g, nf, [seed, 3])
        J2 = sample_freq_indices(g, nf, [seed, 4])
        sm = cur_moments(stack, J, S, J1, J2, s["cur_eps"], s["tau2"], s["tau3"], s["r2_max"], s["r3_max"],
                         s["debias"], sigma2, s["batch"])
    elapsed = time.perf_counter() - t0
    probe = probe_error(stack, sm, seed=s["probe_seed"], size=min(s["probe_size"], stack.grid.n_active),
                        batch=s["batch"])
    r1, r2, r3 = sm.ranks
    print(f"ranks r1={r1} r2={r2} r3={r3}")
    print(f"probe E2={probe.E2:.6e} E3={probe.E3:.6e} (|J|={len(probe.J)})")
    log.info("sketch finished in %.1fs", elapsed)
    store.save_moments(out, sm, dict(m=stack.m, pixel_size=stack.pixel_size, probe_E2=probe.E2,
                                     probe_E3=probe.E3))


def _stage_rules(cfg: dict, L: int, P: int) -> dict:
    q = cfg["quadrature"]
    rules = {}
    for k in (1, 2, 3):
        exact = stage_rule(L, P, k)
        order = q["orders"][k - 1] if len(q["orders"]) >= k else None
        gamma = q["gamma_orders"][k - 1] if len(q["gamma_orders"]) >= k else None
        if order is None and gamma is None:
            rules[k] = exact
            continue
        rule = so3_rule(order if order is not None else exact.order,
                        gamma if gamma is not None else exact.gamma_order)
        if rule.order < exact.order or rule.gamma_order < exact.gamma_order:
            err = certify_table(rule, k * L + P).max()
            log.warning("stage %d quadrature cut to order (%d, %d); worst D-function integration error %.3e",
                        k, rule.order, rule.gamma_order, err)
        rules[k] = rule
    return rules


def _checkpoints(ckdir: Path) -> dict:
    found = {}
    for k in (1, 2, 3):
        p = ckdir / f"stage{k}.smom"
        if p.exists():
            found[k] = p
    return found


def cmd_reconstruct(cfg: dict, moments_path, out, checkpoint_dir=None, resume: bool = False) -> None:
    require(cfg, REQUIRED["reconstruct"])
    sm = store.load_moments(moments_path)
    vb, db = _bases(cfg)
    m = cfg["grid"]["m"]
    grid = FreqGrid(m)
    if sm.d != grid.d or sm.meta.get("m", m) != m:
        raise GridMismatchError(f"moments have d={sm.d}, config grid has m={m} (d={grid.d})")
    ocfg = _optimizer_config(cfg)
    ckdir = Path(checkpoint_dir) if checkpoint_dir else Path(str(out) + ".ckpt")
    ckdir.mkdir(parents=True, exist_ok=True)

    init, done, records = None, 0, []
    if resume:
        found = _checkpoints(ckdir)
        if found:
            done = max(found)
            init, records, _ = store.load_params(found[done])
            if init.vbasis != vb or init.dbasis != db:
                raise GridMismatchError("checkpoint bases do not match the configuration")
            log.info("resuming after stage %d from %s", done, found[done])
    stages = tuple(k for k in (1, 2, 3) if k > done)

    if stages:
        rules = _stage_rules(cfg, vb.L, db.P)
        o = cfg["optimizer"]
        budget = int(o["memory_budget_gb"] * 2 ** 30)
        caches = {}
        for k in stages if init is not None else (1, 2, 3):
            t0 = time.perf_counter()
            caches[k] = precompute(rules[k], sm.U1, sm.U2 if k > 1 else None, sm.U3 if k > 2 else None, grid,
                                   vb, db, single=o["single_precision"], budget=budget)
            log.info("stage %d cache: %d nodes, %.1f MiB, %.1fs", k, rules[k].size, caches[k].nbytes / 2 ** 20,
                     time.perf_counter() - t0)

        def checkpoint(stage, params, rec):
            records.append(rec)
            store.save_params(ckdir / f"stage{stage}.smom", params, records)
            log.info("stage %d: cost %.3e -> %.3e, %d iterations, %.1fs, status %d (%s)", stage, rec.entry_cost,
                     rec.final_cost, rec.iterations, rec.seconds, rec.status, rec.message)

        try:
            params, _ = solve_sequential(sm, caches, ocfg.seed, ocfg, init=init, stages=stages, vbasis=vb,
                                         dbasis=db, callback=checkpoint)
        except OptimizerError as exc:
            if exc.records:
                log.error("stage %d failed after %d iterations", exc.records[-1].stage, exc.records[-1].iterations)
            raise
    else:
        params = init
    store.save_params(out, params, records)
    for rec in records:
        print(f"stage {rec.stage}: entry {rec.entry_cost:.6e} matched {rec.entry_matched:.6e} "
              f"final {rec.final_cost:.6e} iterations {rec.iterations} seconds {rec.seconds:.1f} "
              f"status {rec.status}")


def evaluation_report(params, vc_true, dc_true, cutoff: float = 0.5, n: int | None = None, step_deg: float = 5.0,
                      reflection: bool = True, voxel_size: float = 1.0):
    """Plain-text report and the aligned estimate (VolumeCoeffs, DensityCoeffs)."""
    vc, dc = params.volume(), params.density()
    if vc.basis != vc_true.basis:
        raise GridMismatchError(f"estimate basis {vc.basis!r} differs from truth {vc_true.basis!r}")
    n = n or int(round(2 * vc_true.A))
    if n % 2:
        raise GridMismatchError("render grid size must be even")
    al = align_coeffs(vc, vc_true, step_deg=step_deg, reflection=reflection)
    va, da = al.apply(vc), al.apply_density(dc)
    curve = fsc(render(va, n, voxel_size), render(vc_true, n, voxel_size), cutoff)
    derr = density_error(da, dc_true)
    e = np.degrees(al.euler)
    lines = [
        "# reconstruction evaluation",
        f"alignment: reflect={int(al.reflect)} euler_zyz_deg=({e[0]:.4f}, {e[1]:.4f}, {e[2]:.4f}) "
        f"correlation={al.correlation:.6f}",
        f"resolution (cutoff {cutoff:.6g}): {curve.resolution(cutoff):.4f}",
        f"fsc_at_nyquist: {curve.nyquist_value:.6f}",
        f"density_relative_l2_error: {derr:.6e}",
    ]
    return "\n".join(lines) + "\n" + curve.table(), (va, da)


def cmd_evaluate(cfg: dict, params_path, truth_path, out=None, volume_out=None) -> str:
    params, _, _ = store.load_params(params_path)
    vc_true, dc_true, _, tmeta = store.load_truth(truth_path)
    e = cfg["evaluate"]
    m = cfg["grid"]["m"]
    if m is not None and "m" in tmeta and tmeta["m"] != m:
        raise GridMismatchError(f"truth was simulated on m={tmeta['m']}, config has grid.m={m}")
    report, (va, _) = evaluation_report(params, vc_true, dc_true, e["cutoff"], e["n"], e["step_deg"],
                                        e["reflection"], cfg["grid"]["pixel_size"])
    if out:
        Path(out).write_text(report)
    else:
        sys.stdout.write(report)
    if volume_out:
        n = e["n"] or int(round(2 * vc_true.A))
        store.save_volume(volume_out, render(va, n, cfg["grid"]["pixel_size"]))
    return report


def cmd_quadrature_check(order: int, gamma_order: int | None = None, degree: int | None = None, out=None) -> float:
    t0 = time.perf_counter()
    rule = so3_rule(order, gamma_order)
    degree = rule.certified_order if degree is None else degree
    table = certify_table(rule, degree)
    elapsed = time.perf_counter() - t0
    print(f"# rule order={rule.order} gamma_order={rule.gamma_order} nodes={rule.size}")
    print("# degree max_abs_error")
    for p, err in enumerate(table):
        print(f"{p:3d} {err:.3e}")
    print(f"# worst {table.max():.3e} over degrees <= {degree} ({elapsed:.2f}s)")
    if out:
        store.save_rule(out, rule)
    return float(table.max())


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a configuration value")
    common.add_argument("--threads", type=int, default=None,
                        help=f"BLAS thread count (default: ${THREADS_ENV} or library default)")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded ordered reductions (byte-stable outputs)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="submom", description="Subspace method of moments pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="simulate a projection image stack")
    s.add_argument("--out", required=True)
    s.add_argument("--truth", help="ground-truth sidecar path (default: <out stem>.truth.smom)")
    s = sub.add_parser("sketch", parents=[common], help="compressed moments of an image stack")
    s.add_argument("--stack", required=True)
    s.add_argument("--out", required=True)
    s = sub.add_parser("reconstruct", parents=[common], help="sequential moment matching")
    s.add_argument("--moments", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint-dir", help="per-stage checkpoints (default: <out>.ckpt)")
    s.add_argument("--resume", action="store_true", help="continue after the last finished stage")
    s = sub.add_parser("evaluate", parents=[common], help="align, FSC and density error against the truth")
    s.add_argument("--params", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out", help="report path (default: stdout)")
    s.add_argument("--volume-out", help="write the aligned rendered volume")
    s.add_argument("--cutoff", type=float, help="FSC cutoff (overrides evaluate.cutoff)")
    s = sub.add_parser("quadrature-check", parents=[common], help="certify an SO(3) product rule")
    s.add_argument("--order", type=int, required=True)
    s.add_argument("--gamma-order", type=int)
    s.add_argument("--degree", type=int, help="highest Wigner degree to test (default: rule order)")
    s.add_argument("--out", help="save the rule")
    return p


def _thread_limit(args):
    n = args.threads
    if args.deterministic:
        n = 1
    elif n is None and os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from None
    if n is None:
        return nullcontext()
    if n < 1:
        raise ConfigError("thread count must be positive")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.set)
        if getattr(args, "cutoff", None) is not None:
            cfg["evaluate"]["cutoff"] = args.cutoff
        validate(cfg)
        with _thread_limit(args):
            if args.command == "simulate":
                cmd_simulate(cfg, args.out, args.truth)
            elif args.command == "sketch":
                cmd_sketch(cfg, args.stack, args.out)
            elif args.command == "reconstruct":
                cmd_reconstruct(cfg, args.moments, args.out, args.checkpoint_dir, args.resume)
            elif args.command == "evaluate":
                cmd_evaluate(cfg, args.params, args.truth, args.out, args.volume_out)
            else:
                cmd_quadrature_check(args.order, args.gamma_order, args.degree, args.out)
    except (ConfigError, InvalidDensityError, MemoryBudgetError) as exc:
        log.error("%s", exc)
        return 2
    except ContainerError as exc:
        log.error("%s", exc)
        return 3
    except OptimizerError as exc:
        log.error("optimizer failure: %s (last checkpoint retained)", exc)
        return 4
    except GridMismatchError as exc:
        log.error("grid mismatch: %s", exc)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
