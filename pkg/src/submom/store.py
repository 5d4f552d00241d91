"""Typed readers and writers for the pipeline objects.

Metadata values are stored JSON-encoded so numbers, flags and None
round-trip exactly.
"""
from __future__ import annotations

import json

import numpy as np

from .container import Container, ContainerError, Kind, read_container, write_container
from .evaluation import RealVolume
from .forward import CtfDescriptor, DensityBasis, DensityCoeffs, ImageStack, VolumeBasis, VolumeCoeffs
from .moments import SubspaceMoments
from .quadrature import SO3Rule
from .recon import RealParams, StageRecord

__all__ = [
    "save_stack",
    "load_stack",
    "save_truth",
    "load_truth",
    "save_moments",
    "load_moments",
    "save_params",
    "load_params",
    "save_volume",
    "load_volume",
    "save_rule",
    "load_rule",
]


def _enc(meta: dict) -> dict[str, str]:
    return {k: json.dumps(v, default=_default) for k, v in meta.items()}


def _default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _dec(meta: dict[str, str]) -> dict:
    out = {}
    for k, v in meta.items():
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _need(c: Container, *names: str):
    for n in names:
        if n not in c.arrays:
            raise ContainerError(f"container lacks array {n!r}")


# ----------------------------------------------------------------------------
# image stacks and ground truth
# ----------------------------------------------------------------------------

def save_stack(path, stack: ImageStack) -> None:
    arrays = {"images": stack.images}
    if stack.has_ctf:
        arrays["groups"] = np.asarray(stack.groups, dtype=np.int64)
        arrays["ctf"] = np.array([[c.wavelength, c.defocus, c.cs, c.amplitude_contrast, c.b_factor]
                                  for c in stack.ctfs], dtype=float)
    meta = dict(stack.meta)
    meta.update(m=stack.m, noise_var=stack.noise_var, pixel_size=stack.pixel_size)
    write_container(path, Kind.IMAGE_STACK, arrays, _enc(meta))


def load_stack(path, mmap: bool = True) -> ImageStack:
    c = read_container(path, mmap=mmap, expect=Kind.IMAGE_STACK)
    _need(c, "images")
    meta = _dec(c.meta)
    m = int(meta.pop("m"))
    noise_var = float(meta.pop("noise_var"))
    pixel_size = float(meta.pop("pixel_size"))
    ctfs = groups = None
    if "ctf" in c.arrays:
        ctfs = [CtfDescriptor(*map(float, row)) for row in np.asarray(c["ctf"])]
        groups = np.asarray(c["groups"])
    return ImageStack(c["images"], m, noise_var, ctfs, groups, pixel_size, meta)


def _coeff_meta(vc: VolumeCoeffs, dc: DensityCoeffs) -> dict:
    return dict(L=vc.basis.L, A=vc.basis.A, P=dc.basis.P, reflection_invariant=dc.basis.reflection_invariant)


def save_truth(path, vc: VolumeCoeffs, dc: DensityCoeffs, rotations=None, meta: dict | None = None) -> None:
    """Ground-truth sidecar: complex coefficients and the sampled Euler angles."""
    arrays = {"a": vc.a, "b": dc.b}
    if rotations is not None:
        arrays["rotations"] = np.asarray(rotations, dtype=float)
    info = dict(meta or {})
    info.update(_coeff_meta(vc, dc), role="truth")
    write_container(path, Kind.PARAMS, arrays, _enc(info))


def load_truth(path):
    """Returns (VolumeCoeffs, DensityCoeffs, rotations or None, meta)."""
    c = read_container(path, expect=Kind.PARAMS)
    meta = _dec(c.meta)
    if meta.get("role") != "truth":
        raise ContainerError(f"{path}: not a ground-truth sidecar")
    _need(c, "a", "b")
    vb = VolumeBasis(meta["L"], meta["A"])
    db = DensityBasis(meta["P"], meta["reflection_invariant"])
    return VolumeCoeffs(vb, c["a"]), DensityCoeffs(db, c["b"]), c.arrays.get("rotations"), meta


# ----------------------------------------------------------------------------
# moments
# ----------------------------------------------------------------------------

def save_moments(path, sm: SubspaceMoments, meta: dict | None = None) -> None:
    info = dict(sm.meta)
    info.update(meta or {})
    arrays = dict(U1=sm.U1, U2=sm.U2, U3=sm.U3, m1=sm.m1, m2=sm.m2, m3=sm.m3)
    write_container(path, Kind.MOMENTS, arrays, _enc(info))


def load_moments(path) -> SubspaceMoments:
    c = read_container(path, expect=Kind.MOMENTS)
    _need(c, "U1", "U2", "U3", "m1", "m2", "m3")
    return SubspaceMoments(c["U1"], c["U2"], c["U3"], c["m1"], c["m2"], c["m3"], _dec(c.meta))


# ----------------------------------------------------------------------------
# reconstruction parameters
# ----------------------------------------------------------------------------

def save_params(path, params: RealParams, records=(), meta: dict | None = None) -> None:
    """Real parameters plus per-stage diagnostics (cost trajectories and
    exit status).  Wall times are logged, not stored, so reruns write
    identical bytes."""
    arrays = {"at": params.at, "bt": params.bt}
    info = dict(meta or {})
    info.update(L=params.vbasis.L, A=params.vbasis.A, P=params.dbasis.P,
                reflection_invariant=params.dbasis.reflection_invariant, role="estimate")
    stages = []
    for rec in records:
        arrays[f"costs_stage{rec.stage}"] = np.asarray(rec.costs, dtype=float)
        info[f"stage{rec.stage}"] = dict(entry_cost=rec.entry_cost, final_cost=rec.final_cost,
                                         entry_matched=rec.entry_matched, status=rec.status,
                                         message=rec.message, iterations=rec.iterations)
        stages.append(rec.stage)
    info["stages"] = stages
    write_container(path, Kind.PARAMS, arrays, _enc(info))


def load_params(path):
    """Returns (RealParams, records, meta)."""
    c = read_container(path, expect=Kind.PARAMS)
    meta = _dec(c.meta)
    if meta.get("role") != "estimate":
        raise ContainerError(f"{path}: not a parameter estimate")
    _need(c, "at", "bt")
    vb = VolumeBasis(meta["L"], meta["A"])
    db = DensityBasis(meta["P"], meta["reflection_invariant"])
    records = []
    for k in meta.get("stages", []):
        d = meta[f"stage{k}"]
        records.append(StageRecord(k, d["entry_cost"], d["final_cost"], d["entry_matched"],
                                   list(c.arrays.get(f"costs_stage{k}", [])), d["status"], d["message"],
                                   d["iterations"], float("nan")))
    return RealParams(c["at"], c["bt"], vb, db), records, meta


# ----------------------------------------------------------------------------
# volumes and rules
# ----------------------------------------------------------------------------

def save_volume(path, vol: RealVolume, meta: dict | None = None) -> None:
    info = dict(meta or {})
    info["voxel_size"] = vol.voxel_size
    write_container(path, Kind.VOLUME, {"data": vol.data}, _enc(info))


def load_volume(path) -> RealVolume:
    c = read_container(path, expect=Kind.VOLUME)
    _need(c, "data")
    return RealVolume(c["data"], float(_dec(c.meta)["voxel_size"]))


def save_rule(path, rule: SO3Rule) -> None:
    arrays = dict(alpha=rule.alpha, beta=rule.beta, gamma=rule.gamma, weights=rule.weights)
    info = dict(rule.meta)
    info.update(order=rule.order, gamma_order=rule.gamma_order)
    write_container(path, Kind.RULE, arrays, _enc(info))


def load_rule(path) -> SO3Rule:
    c = read_container(path, expect=Kind.RULE)
    _need(c, "alpha", "beta", "gamma", "weights")
    meta = _dec(c.meta)
    order, gamma_order = int(meta.pop("order")), int(meta.pop("gamma_order"))
    return SO3Rule(c["alpha"], c["beta"], c["gamma"], c["weights"], order, gamma_order, meta)
