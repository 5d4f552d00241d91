"""Moment matching for the volume and viewing-direction density.

The model moments at a quadrature rule {(R_i, w_i)} are

    m1 = sum_i c_i v_i,  m2 = sum_i c_i v_i v_i^H,  m3 = sum_i c_i v_i^{x3},

with c_i = w_i mu(R_i) and v_i = U^H Phi[R_i] a.  Rotating a slice only mixes
the m index inside each degree,

    U^H Phi[R] a = sum_l K_l conj(D^l(R))^T T_l at_l,   K = U^H Phi[I],

so the cache keeps K per basis and one small matrix per node and degree
instead of the full r x |B_V| blocks.  Both the cost and its gradient are
accumulated over nodes; the third-moment term never forms a model tensor
(it uses the Gram matrix v_i^H v_j).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .forward import (
    DensityBasis,
    DensityCoeffs,
    FreqGrid,
    ImageStack,
    VolumeBasis,
    VolumeCoeffs,
    _volume_realness_block,
    evaluate_slices,
    phi_matrix,
    vmf_mixture_density,
)
from .moments import SubspaceMoments, project_moments, sketch_moments
from .quadrature import SO3Rule, fibonacci_sphere, so3_rule
from .specfun import cart_to_sph, wigner_D_matrices
from .tensorkit import SketchConfig

__all__ = [
    "RealParams",
    "StageWeights",
    "PrecomputeCache",
    "OptimizerConfig",
    "OptimizerError",
    "StageRecord",
    "MemoryBudgetError",
    "stage_rule",
    "precompute",
    "subspace_moments_model",
    "cost_grad",
    "density_constraints",
    "collocation_points",
    "initial_params",
    "solve_stage",
    "solve_sequential",
    "analytic_moments",
    "invisible_subspace",
]

DEFAULT_COLLOCATION = 322
DEFAULT_MEMORY_BUDGET = 4 * 2 ** 30


class OptimizerError(RuntimeError):
    """Raised when the constrained minimizer fails; carries the last iterate."""

    def __init__(self, message: str, params: "RealParams", records: list):
        super().__init__(message)
        self.params = params
        self.records = records


class MemoryBudgetError(MemoryError):
    pass


@dataclass
class RealParams:
    """Real parameters (at, bt) of a volume and a density."""

    at: np.ndarray
    bt: np.ndarray
    vbasis: VolumeBasis
    dbasis: DensityBasis

    def __post_init__(self):
        self.at = np.asarray(self.at, dtype=float)
        self.bt = np.asarray(self.bt, dtype=float)
        if self.at.shape != (self.vbasis.size,) or self.bt.shape != (self.dbasis.n_free,):
            raise ValueError("parameter sizes do not match the bases")
        if not (np.all(np.isfinite(self.at)) and np.all(np.isfinite(self.bt))):
            raise ValueError("parameters must be finite")

    @property
    def size(self) -> int:
        return self.vbasis.size + self.dbasis.n_free

    def vector(self) -> np.ndarray:
        return np.concatenate([self.at, self.bt])

    def with_vector(self, x: np.ndarray) -> "RealParams":
        n = self.vbasis.size
        return RealParams(x[:n].copy(), x[n:].copy(), self.vbasis, self.dbasis)

    def volume(self) -> VolumeCoeffs:
        return VolumeCoeffs.from_real(self.vbasis, self.at)

    def density(self) -> DensityCoeffs:
        return DensityCoeffs.from_real(self.dbasis, self.bt)

    @classmethod
    def from_coeffs(cls, vc: VolumeCoeffs, dc: DensityCoeffs) -> "RealParams":
        return cls(vc.real_params(), dc.real_params(), vc.basis, dc.basis)


@dataclass(frozen=True)
class StageWeights:
    lam1: float
    lam2: float
    lam3: float

    def __post_init__(self):
        if min(self.lam1, self.lam2, self.lam3) < 0:
            raise ValueError("stage weights must be nonnegative")

    @classmethod
    def from_targets(cls, sm: SubspaceMoments) -> "StageWeights":
        def inv(x):
            n = float(np.linalg.norm(x)) ** 2
            return 1.0 / n if n > 0 else 0.0
        return cls(inv(sm.m1), inv(sm.m2), inv(sm.m3))

    def __getitem__(self, k: int) -> float:
        return (self.lam1, self.lam2, self.lam3)[k - 1]


def stage_rule(L: int, P: int, stage: int) -> SO3Rule:
    """Smallest product rule integrating the stage-k moment integrand exactly:
    sphere order k L + P, in-plane order k L."""
    if stage not in (1, 2, 3):
        raise ValueError("stage must be 1, 2 or 3")
    return so3_rule(stage * L + P, stage * L)


class PrecomputeCache:
    """Node-independent projected slices K_k = U_k^H Phi[I] (one per basis)
    together with the per-node Wigner mixing matrices and density rows.

    ``block(i, k)`` materializes U_k^H Phi[R_i] for checks; the solver never
    needs it.
    """

    def __init__(self, rule: SO3Rule, bases: list, grid: FreqGrid, vbasis: VolumeBasis, dbasis: DensityBasis,
                 single: bool = False):
        self.rule = rule
        self.grid = grid
        self.vbasis = vbasis
        self.dbasis = dbasis
        self.weights = np.asarray(rule.weights, dtype=float)
        self.single = bool(single)
        cdt = np.complex64 if single else np.complex128
        Q = rule.size
        self.Q = Q
        phi0 = phi_matrix(np.eye(3), grid, vbasis)
        # K_k = U_k^H Phi[I]; bases that are the same object share storage
        self.K = []
        seen = {}
        for U in bases:
            if U is None:
                self.K.append(None)
                continue
            key = id(U)
            if key not in seen:
                seen[key] = (U.conj().T @ phi0).astype(cdt)
            self.K.append(seen[key])
        Ds = wigner_D_matrices(vbasis.L, rule.alpha, rule.beta, rule.gamma)
        # Z_l[i] = conj(D^l(R_i))^T T_l, so that slice coefficients are Z_l at_l
        self.Z = {}
        for l in vbasis.degrees:
            T = _volume_realness_block(l)
            self.Z[l] = np.einsum("qmn,mk->qnk", Ds[l].conj(), T).astype(cdt)
        # density rows: mu_i = mu0_i + Psi_i . bt
        rows = dbasis.design(rule.beta, rule.alpha)
        self.mu0 = (rows @ dbasis.fixed()).real
        self.Psi = (rows @ dbasis.realness_matrix).real

    @property
    def ranks(self) -> list[int]:
        return [0 if K is None else K.shape[0] for K in self.K]

    @property
    def nbytes(self) -> int:
        seen = {id(K): K.nbytes for K in self.K if K is not None}
        return (sum(seen.values()) + sum(Z.nbytes for Z in self.Z.values()) + self.Psi.nbytes
                + self.mu0.nbytes + self.weights.nbytes)

    def coeff_slices(self, at: np.ndarray) -> np.ndarray:
        """(Q, |B_V|) complex: the rotated coefficient vectors conj(D)^T T at per node."""
        vb = self.vbasis
        out = np.empty((self.Q, vb.size), dtype=self.Z[vb.degrees[0]].dtype)
        for l in vb.degrees:
            sl = vb.block(l)
            Al = at[sl].reshape(2 * l + 1, vb.S[l])
            out[:, sl] = np.einsum("qnk,ks->qns", self.Z[l], Al).reshape(self.Q, -1)
        return out

    def slices(self, at: np.ndarray, k: int, Y: np.ndarray | None = None) -> np.ndarray:
        """(Q, r_k) projected slices v_i = U_k^H Phi[R_i] J at."""
        if Y is None:
            Y = self.coeff_slices(at)
        return Y @ self.K[k - 1].T

    def adjoint(self, G: np.ndarray, k: int) -> np.ndarray:
        """Re sum_i (U_k^H Phi[R_i] J)^H g_i for G of shape (Q, r_k)."""
        H = G @ self.K[k - 1].conj()
        return self.adjoint_coeff(H)

    def adjoint_coeff(self, H: np.ndarray) -> np.ndarray:
        vb = self.vbasis
        out = np.empty(vb.size)
        for l in vb.degrees:
            sl = vb.block(l)
            Hl = H[:, sl].reshape(self.Q, 2 * l + 1, vb.S[l])
            out[sl] = np.einsum("qnk,qns->ks", self.Z[l].conj(), Hl).real.ravel()
        return out

    def mu(self, bt: np.ndarray) -> np.ndarray:
        return self.mu0 + self.Psi @ bt

    def block(self, i: int, k: int, realness: bool = False) -> np.ndarray:
        """U_k^H Phi[R_i] (times J when ``realness``), shape r_k x |B_V|."""
        vb = self.vbasis
        K = self.K[k - 1]
        out = np.zeros((K.shape[0], vb.size), dtype=complex)
        for l in vb.degrees:
            sl = vb.block(l)
            Zl = self.Z[l][i]
            if not realness:
                Zl = Zl @ np.linalg.inv(_volume_realness_block(l))
            Kl = K[:, sl].reshape(-1, 2 * l + 1, vb.S[l])
            out[:, sl] = np.einsum("rns,nk->rks", Kl, Zl).reshape(K.shape[0], -1)
        return out


def invisible_subspace(cache: PrecomputeCache, rtol: float = 1e-10, chunk: int = 64) -> np.ndarray:
    """Orthonormal real basis of the volume directions that no compressed
    moment can observe: U_k^H Phi[R] J delta = 0 for every basis in the cache
    and every node.  The cost is constant along these directions.

    The Gram matrix Re sum_i A_i^H A_i is accumulated over the nodes; for a
    rule exact to degree 2L its null space is the null space over all of SO(3).
    """
    vb = cache.vbasis
    n = vb.size
    bases = []
    for K in cache.K:
        if K is not None and not any(K is B for B in bases):
            bases.append(K)
    if not bases:
        return np.eye(n)
    Kall = np.concatenate([np.asarray(K, dtype=complex) for K in bases])
    Gram = np.zeros((n, n), dtype=complex)
    for lo in range(0, cache.Q, chunk):
        hi = min(lo + chunk, cache.Q)
        B = np.zeros((hi - lo, Kall.shape[0], n), dtype=complex)
        for l in vb.degrees:
            sl = vb.block(l)
            Kl = Kall[:, sl].reshape(-1, 2 * l + 1, vb.S[l])
            B[:, :, sl] = np.einsum("rks,qkn->qrns", Kl, cache.Z[l][lo:hi]).reshape(hi - lo, -1, (2 * l + 1) * vb.S[l])
        B *= np.sqrt(cache.weights[lo:hi])[:, None, None]
        Gram += np.einsum("qra,qrb->ab", B.conj(), B, optimize=True)
    lam, V = np.linalg.eigh(Gram.real)
    return V[:, lam <= rtol * lam.max()]


def precompute(rule: SO3Rule, U1, U2, U3, grid: FreqGrid, vbasis: VolumeBasis, dbasis: DensityBasis,
               single: bool = False, budget: int | None = DEFAULT_MEMORY_BUDGET) -> PrecomputeCache:
    """Cache for cost evaluation at the nodes of ``rule``; pass None for
    bases of unused stages."""
    item = 8 if single else 16
    need = item * (sum(U.shape[1] for U in (U1, U2, U3) if U is not None) * vbasis.size
                   + rule.size * sum((2 * l + 1) ** 2 for l in vbasis.degrees))
    need += 8 * rule.size * (dbasis.size + 1)
    if budget is not None and need > budget:
        raise MemoryBudgetError(f"precompute needs {need} bytes, budget is {budget}")
    for U in (U1, U2, U3):
        if U is not None and U.shape[0] != grid.d:
            raise ValueError("basis row count does not match the grid")
    return PrecomputeCache(rule, [U1, U2, U3], grid, vbasis, dbasis, single)


def subspace_moments_model(params: RealParams, cache: PrecomputeCache, orders=(1, 2, 3)):
    """Model moments (m1, m2, m3) at the cache rule (None for skipped orders)."""
    c = cache.weights * cache.mu(params.bt)
    Y = cache.coeff_slices(params.at)
    out = []
    for k in (1, 2, 3):
        if k not in orders or cache.K[k - 1] is None:
            out.append(None)
            continue
        V = cache.slices(params.at, k, Y).astype(complex)
        if k == 1:
            out.append(c @ V)
        elif k == 2:
            out.append((V * c[:, None]).T @ V.conj())
        else:
            out.append(np.einsum("q,qa,qb,qc->abc", c, V, V, V, optimize=True))
    return tuple(out)


def _term1(V, c, t1, lam):
    E = c @ V - t1
    f = lam * np.vdot(E, E).real
    G = 2 * lam * c[:, None] * E[None, :]
    dc = 2 * lam * (V.conj() @ E).real
    return f, G, dc


def _term2(V, c, t2, lam):
    E = (V * c[:, None]).T @ V.conj() - t2
    f = lam * np.vdot(E, E).real
    EV = V @ E.T  # row i holds (E v_i)^T
    G = 4 * lam * c[:, None] * EV
    dc = 2 * lam * np.einsum("qa,qa->q", V.conj(), EV).real
    return f, G, dc


def _term3(V, c, t3c, t3norm2, lam):
    """Third-moment residual through the Gram matrix; t3c is conj(t3)."""
    r = V.shape[1]
    K = V.conj() @ V.T               # K[j, i] = v_j^H v_i
    K2 = K * K
    S = float(c @ (K2 * K).real @ c)
    W = (t3c.reshape(r * r, r) @ V.T).reshape(r, r, -1)   # W[a, b, i]
    u = np.einsum("abq,qa->qb", W, V)                      # u_i = sum_a W[a, :, i] v_ia
    tau = np.einsum("qb,qb->q", u, V)
    X = float(c @ tau.real)
    f = lam * (S - 2 * X + t3norm2)
    G = lam * (6 * c[:, None] * (K2 @ (c[:, None] * V)) - 6 * c[:, None] * u.conj())
    dc = lam * (2 * (K2 * K).real @ c - 2 * tau.real)
    return f, G, dc


def cost_grad(params: RealParams | np.ndarray, cache: PrecomputeCache, targets: SubspaceMoments,
              weights: StageWeights, stage: int, template: RealParams | None = None):
    """Cost sum_{k <= stage} lam_k ||m_k - mbar_k||_F^2 and its gradient with
    respect to the stacked real vector (at, bt)."""
    if stage not in (1, 2, 3):
        raise ValueError("stage must be 1, 2 or 3")
    if isinstance(params, np.ndarray):
        params = template.with_vector(params)
    mu = cache.mu(params.bt)
    c = cache.weights * mu
    Y = cache.coeff_slices(params.at)
    total = 0.0
    H = np.zeros((cache.Q, cache.vbasis.size), dtype=complex)
    dc = np.zeros(cache.Q)
    t3 = None
    for k in range(1, stage + 1):
        lam = weights[k]
        if lam == 0:
            continue
        Kk = cache.K[k - 1]
        if Kk is None:
            raise ValueError(f"cache has no basis for moment {k}")
        V = (Y @ Kk.T).astype(complex)
        if k == 1:
            f, G, d = _term1(V, c, targets.m1, lam)
        elif k == 2:
            f, G, d = _term2(V, c, targets.m2, lam)
        else:
            t3 = targets.m3
            f, G, d = _term3(V, c, t3.conj(), float(np.vdot(t3, t3).real), lam)
        total += f
        H += G @ Kk.conj()
        dc += d
    ga = cache.adjoint_coeff(H)
    gb = cache.Psi.T @ (cache.weights * dc)
    return float(total), np.concatenate([ga, gb])


# ----------------------------------------------------------------------------
# constraints and initialization
# ----------------------------------------------------------------------------

def collocation_points(n: int = DEFAULT_COLLOCATION) -> np.ndarray:
    return fibonacci_sphere(n)


def _density_rows(dbasis: DensityBasis, points: np.ndarray):
    _, th, ph = cart_to_sph(points[:, 0], points[:, 1], points[:, 2])
    rows = dbasis.design(th, ph)
    return (rows @ dbasis.fixed()).real, (rows @ dbasis.realness_matrix).real


def density_constraints(params: RealParams, collocation: np.ndarray | None = None):
    """Density values at the collocation points (affine in bt) and the
    normalization residual, which is zero because b_{0,0} is fixed."""
    pts = collocation_points() if collocation is None else np.asarray(collocation, dtype=float)
    if len(pts) == 0:
        raise ValueError("collocation set is empty")
    nu0, Psi = _density_rows(params.dbasis, pts)
    b = params.dbasis.to_complex(params.bt)
    return nu0 + Psi @ params.bt, float(abs(b[0] - 1.0))


def initial_params(vbasis: VolumeBasis, dbasis: DensityBasis, m1_norm: float, seed: int,
                   n_modes: int = 3, kappa: float = 2.0, collocation: np.ndarray | None = None) -> RealParams:
    """Gaussian volume with sigma = ||m1|| / sqrt(|B_V|) and a random vMF
    mixture density (shrunk toward uniform until nonnegative)."""
    rng = np.random.default_rng([seed, 0xC0FFEE])
    sigma = m1_norm / np.sqrt(vbasis.size) if m1_norm > 0 else 1.0 / np.sqrt(vbasis.size)
    at = rng.normal(scale=sigma, size=vbasis.size)
    if dbasis.n_free == 0:
        return RealParams(at, np.zeros(0), vbasis, dbasis)
    centers = rng.normal(size=(n_modes, 3))
    w = rng.dirichlet(np.ones(n_modes))
    dc = vmf_mixture_density(centers, w, kappa, dbasis.P, dbasis.reflection_invariant)
    bt = dc.real_params()
    pts = collocation_points() if collocation is None else collocation
    nu0, Psi = _density_rows(dbasis, pts)
    for _ in range(60):
        if (nu0 + Psi @ bt).min() >= 0:
            break
        bt = 0.5 * bt
    return RealParams(at, bt, vbasis, dbasis)


# ----------------------------------------------------------------------------
# solver
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    ftol: float = 1e-8
    maxiter: int = 1000
    collocation: int = DEFAULT_COLLOCATION
    seed: int = 0
    init_kappa: float = 2.0
    init_modes: int = 3
    fail_modes: tuple = (4, 5, 6, 7)
    gauge: bool = True
    gauge_rtol: float = 1e-6
    init_norm: str = "m2"
    init_scale: float = 1.0
    # objective multiplier handed to SLSQP per stage; its stopping test is
    # absolute, and the third-stage cost is tiny once the first two match
    cost_scale: tuple = (1.0, 1.0, 1e4)

    def __post_init__(self):
        if self.init_norm not in ("m1", "m2"):
            raise ValueError("init_norm must be 'm1' or 'm2'")
        cs = self.cost_scale
        cs = (float(cs),) * 3 if np.isscalar(cs) else tuple(float(c) for c in cs)
        if len(cs) != 3:
            raise ValueError("cost_scale needs one value per stage")
        object.__setattr__(self, "cost_scale", cs)
        if min(cs) <= 0 or self.init_scale <= 0:
            raise ValueError("cost_scale and init_scale must be positive")


@dataclass
class StageRecord:
    stage: int
    entry_cost: float
    final_cost: float
    entry_matched: float      # cost of the previous stage's terms at entry
    costs: list = field(default_factory=list)
    status: int = 0
    message: str = ""
    iterations: int = 0
    seconds: float = 0.0


def solve_stage(stage: int, params: RealParams, cache: PrecomputeCache, targets: SubspaceMoments,
                weights: StageWeights, cfg: OptimizerConfig, pts: np.ndarray | None = None,
                prev_cache: PrecomputeCache | None = None):
    """One constrained minimization warm-started at ``params``."""
    pts = collocation_points(cfg.collocation) if pts is None else pts
    nu0, Psi = _density_rows(params.dbasis, pts)
    nv = params.vbasis.size
    Amat = np.hstack([np.zeros((len(pts), nv)), Psi])
    cons = []
    if params.dbasis.n_free:
        cons.append({"type": "ineq", "fun": lambda x: nu0 + Psi @ x[nv:], "jac": lambda x: Amat})
    trace = []

    scale = cfg.cost_scale[stage - 1]

    def fun(x):
        f, g = cost_grad(x, cache, targets, weights, stage, params)
        trace.append(f)
        return scale * f, scale * g

    x0 = params.vector()
    t0 = time.perf_counter()
    entry, _ = cost_grad(x0, cache, targets, weights, stage, params)
    matched = np.nan
    if stage > 1:
        matched, _ = cost_grad(x0, cache, targets, weights, stage - 1, params)
    res = optimize.minimize(fun, x0, jac=True, method="SLSQP", constraints=cons,
                            options=dict(ftol=cfg.ftol, maxiter=cfg.maxiter))
    out = params.with_vector(res.x)
    final, _ = cost_grad(res.x, cache, targets, weights, stage, params)
    rec = StageRecord(stage, float(entry), float(final), float(matched), trace, int(res.status),
                      str(res.message), int(res.nit), time.perf_counter() - t0)
    return out, rec


def _condition_init(params: RealParams, caches: dict, targets: SubspaceMoments, cfg: OptimizerConfig) -> RealParams:
    """Remove unobservable directions from a random start and fix its scale.

    The cost is constant along directions invisible to every projected
    slice, so a random component there survives all stages.  With
    ``init_norm="m2"`` the volume is rescaled so the model second moment
    has the norm of the target one.
    """
    at = params.at
    if cfg.gauge:
        Nb = invisible_subspace(caches[max(caches)], rtol=cfg.gauge_rtol)
        at = at - Nb @ (Nb.T @ at)
    p = RealParams(at, params.bt, params.vbasis, params.dbasis)
    s = 1.0
    if cfg.init_norm == "m2":
        c2 = next((caches[k] for k in sorted(caches) if caches[k].K[1] is not None), None)
        if c2 is not None:
            model = np.linalg.norm(subspace_moments_model(p, c2, orders=(2,))[1])
            if model > 0:
                s = np.sqrt(np.linalg.norm(targets.m2) / model)
        else:
            model = np.linalg.norm(subspace_moments_model(p, caches[min(caches)], orders=(1,))[0])
            if model > 0:
                s = np.linalg.norm(targets.m1) / model
    return RealParams(cfg.init_scale * s * at, params.bt, params.vbasis, params.dbasis)


def solve_sequential(targets: SubspaceMoments, caches: dict, init_seed: int = 0,
                     cfg: OptimizerConfig | None = None, init: RealParams | None = None,
                     stages=(1, 2, 3), vbasis: VolumeBasis | None = None, dbasis: DensityBasis | None = None,
                     callback=None):
    """Fit the first moment, then the first two, then all three, each stage
    warm-started from the previous one.

    ``caches`` maps stage -> PrecomputeCache.  ``callback(stage, params,
    record)`` is called after every stage (checkpointing).  Returns
    (params, records).
    """
    cfg = cfg or OptimizerConfig(seed=init_seed)
    weights = StageWeights.from_targets(targets)
    first = caches[min(stages)]
    vbasis = vbasis or first.vbasis
    dbasis = dbasis or first.dbasis
    pts = collocation_points(cfg.collocation)
    params = init or initial_params(vbasis, dbasis, float(np.linalg.norm(targets.m1)), init_seed,
                                    cfg.init_modes, cfg.init_kappa, pts)
    if init is None:
        params = _condition_init(params, caches, targets, cfg)
    records = []
    for stage in stages:
        params_new, rec = solve_stage(stage, params, caches[stage], targets, weights, cfg, pts)
        records.append(rec)
        if rec.status in cfg.fail_modes or not np.all(np.isfinite(params_new.vector())):
            raise OptimizerError(f"stage {stage}: {rec.message} (status {rec.status})", params_new, records)
        params = params_new
        if callback is not None:
            callback(stage, params, rec)
    return params, records


# ----------------------------------------------------------------------------
# analytic targets
# ----------------------------------------------------------------------------

def analytic_moments(vc: VolumeCoeffs, dc: DensityCoeffs, grid: FreqGrid, rule: SO3Rule,
                     cfg2: SketchConfig, cfg3: SketchConfig) -> SubspaceMoments:
    """Noiseless population moments by quadrature over ``rule``: the nodes
    act as images weighted by w_i mu(R_i); bases come from the same sketches
    as the streaming path."""
    X = evaluate_slices(vc, grid, np.stack([rule.alpha, rule.beta, rule.gamma], -1))
    c = rule.weights * dc.values(rule.beta, rule.alpha)
    stack = ImageStack(X, grid.m)
    sk = sketch_moments(stack, cfg2, cfg3, weights=c)
    meta = dict(seed2=cfg2.seed, seed3=cfg3.seed, tau2=cfg2.tau, tau3=cfg3.tau, s=cfg2.s, analytic=True,
                rule_order=rule.order, rule_gamma_order=rule.gamma_order)
    return project_moments(stack, sk["U2"], sk["U2"], sk["U3"], meta=meta, weights=c)
