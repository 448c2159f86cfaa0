"""Axisymmetric membrane equilibrium solver (shooting method).

Solves the inflation boundary-value problem for ringless and ringed
membranes and exposes force-pressure-height queries.  All pressures are
MPa, lengths mm, forces N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import brentq

from . import _rk
from .designs import MembraneDesign, Segment, segment_layout
from .errors import (
    ExtensionLimitExceeded,
    NoEquilibrium,
    NotReachable,
    ShootingFailed,
    SingularRhs,
)
from .material import MaterialParams, gent_derivatives

_STATUS_ERRORS = {
    _rk.EXTENSION_LIMIT: ExtensionLimitExceeded,
    _rk.SINGULAR: SingularRhs,
    _rk.STEP_UNDERFLOW: SingularRhs,
}


@dataclass(frozen=True)
class SolverConfig:
    ode_abs_tol: float = 1e-9
    ode_rel_tol: float = 1e-9
    shoot_tol: float = 1e-8
    f_cap_n: float = 200.0
    report_nodes: int = 450
    height_tol_mm: float = 0.05
    max_iter: int = 200
    scan_points: int = 80
    ring_mu_scale: float = 100.0
    ring_jm: float = 1.0


DEFAULT_SOLVER = SolverConfig()


def ring_material(mat: MaterialParams, config: SolverConfig = DEFAULT_SOLVER) -> MaterialParams:
    """Stiff-Gent stand-in for the strain-limiter fabric."""
    return MaterialParams(
        mu=mat.mu * config.ring_mu_scale, jm=config.ring_jm, thickness=mat.thickness
    )


@dataclass(frozen=True)
class BvpState:
    """Pointwise BVP state: stretches, tangent angle, height, deformed radius."""

    l1: float
    l2: float
    beta: float
    z: float
    r: float

    @property
    def deformed_radius(self) -> float:
        return self.l2 * self.r


@dataclass
class MembraneShape:
    """Deformed profile from the BVP solve, anchored so Z(rf) = 0."""

    r: np.ndarray
    R: np.ndarray
    Z: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    beta: np.ndarray
    contact_height: float
    pressure: float
    force: float
    x: float  # l1 at the contact radius
    branch: int = 0
    n_integrations: int = 0
    junction_residuals: tuple[float, ...] = ()


class RhsDerivatives(NamedTuple):
    dl1: float
    dl2: float
    dbeta: float
    dz: float


def ode_rhs(state: BvpState, r: float, p_tilde: float, mat: MaterialParams) -> RhsDerivatives:
    """Equilibrium derivatives of (l1, l2, beta, z) at radius r.

    p_tilde is pressure over thickness (MPa/mm).
    """
    out = np.empty(4)
    status = _rk._rhs(
        r, np.array([state.l1, state.l2, state.beta, state.z]),
        mat.mu, mat.jm, p_tilde, out,
    )
    if status == _rk.EXTENSION_LIMIT:
        raise ExtensionLimitExceeded(f"stretch state ({state.l1}, {state.l2}) past lock-up")
    if status != _rk.OK:
        # W1 or W11 vanished with a nonzero numerator: loss of ellipticity.
        raise SingularRhs(f"singular rhs at r={r}, state=({state.l1}, {state.l2}, {state.beta})")
    return RhsDerivatives(out[0], out[1], out[2], out[3])


def _l1_bounds(l2: float, jm: float) -> tuple[float, float]:
    """Admissible l1 interval at fixed l2, strictly inside the Gent limit.

    Solves l1^2 + 1/(l1^2 l2^2) = 3 + Jm - l2^2 as a quadratic in l1^2.
    """
    k = 3.0 + jm * (1.0 - 1e-6) - l2 * l2
    disc = k * k - 4.0 / (l2 * l2)
    if k <= 0.0 or disc <= 0.0:
        raise ExtensionLimitExceeded(f"no admissible l1 at l2 = {l2} for Jm = {jm}")
    root = math.sqrt(disc)
    u_lo = (k - root) / 2.0
    u_hi = (k + root) / 2.0
    return math.sqrt(u_lo) * (1.0 + 1e-7), math.sqrt(u_hi) * (1.0 - 1e-7)


def boundary_beta(
    x: float, force: float, pressure: float, design: MembraneDesign,
    mat: MaterialParams, branch: int = 0,
) -> float:
    """Tangent angle at the contact radius from vertical force balance.

    beta(r0) = arcsin((-F + pi p r0^2 l2^2) / (2 pi t r0 W1)) with l2 = 1.
    branch 0 is the principal arcsin value; branch 1 reflects past vertical
    (beta = +-pi - arcsin), covering shapes whose tangent at the plate edge
    has tipped beyond 90 degrees.
    """
    r0 = design.contact_radius
    num = -force + math.pi * pressure * r0 * r0  # l2 = 1 at the plate edge
    if abs(num) < 1e-14:
        return 0.0
    w1 = gent_derivatives(x, 1.0, mat).w1
    den = 2.0 * math.pi * mat.thickness * r0 * w1
    if abs(den) < 1e-300:
        raise NoEquilibrium(f"W1 vanishes at x = {x}; no angle balances F = {force} N")
    arg = num / den
    if abs(arg) > 1.0:
        raise NoEquilibrium(
            f"no static shape: |sin beta(r0)| = {abs(arg):.4g} > 1 at x = {x}"
        )
    beta = math.asin(arg)
    if branch:
        beta = math.copysign(math.pi, arg) - beta
    return beta


def _match_lambda1(l1_from: float, l2: float, mat_from: MaterialParams,
                   mat_to: MaterialParams) -> float:
    """Meridional tension continuity across a material junction.

    Finds l1 on the far side with t_to * W1_to(l1, l2) = t_from * W1_from.
    """
    target = mat_from.thickness * gent_derivatives(l1_from, l2, mat_from).w1
    lo, hi = _l1_bounds(l2, mat_to.jm)

    def f(l1):
        return mat_to.thickness * gent_derivatives(l1, l2, mat_to).w1 - target

    f_lo, f_hi = f(lo), f(hi)
    if f_lo > 0.0 or f_hi < 0.0:
        raise SingularRhs(
            f"tension matching not bracketed at junction (l2 = {l2:.4f})"
        )
    return brentq(f, lo, hi, xtol=1e-13, rtol=8.9e-16)


@dataclass
class _Trace:
    """Accumulated per-segment integration output."""

    rs: list[np.ndarray] = field(default_factory=list)
    ys: list[np.ndarray] = field(default_factory=list)
    junction_residuals: list[float] = field(default_factory=list)
    n_integrations: int = 0


def _segment_materials(design: MembraneDesign, mat: MaterialParams,
                       config: SolverConfig) -> list[tuple[Segment, MaterialParams]]:
    rmat = ring_material(mat, config)
    return [(seg, rmat if seg.kind == "ring" else mat)
            for seg in segment_layout(design)]


def _integrate(design: MembraneDesign, mat: MaterialParams, pressure: float,
               force: float, x: float, config: SolverConfig,
               dense: bool, branch: int = 0) -> _Trace:
    """Integrate the equilibrium ODEs outward from r0 for a trial x."""
    beta0 = boundary_beta(x, force, pressure, design, mat, branch)
    trace = _Trace()
    y = np.array([x, 1.0, beta0, 0.0])
    total_span = design.outer_radius - design.contact_radius
    prev_mat: MaterialParams | None = None
    for seg, seg_mat in _segment_materials(design, mat, config):
        if prev_mat is not None and seg_mat is not prev_mat:
            l1_new = _match_lambda1(y[0], y[1], prev_mat, seg_mat)
            resid = (seg_mat.thickness * gent_derivatives(l1_new, y[1], seg_mat).w1
                     - prev_mat.thickness * gent_derivatives(y[0], y[1], prev_mat).w1)
            trace.junction_residuals.append(resid)
            y = np.array([l1_new, y[1], y[2], y[3]])
        span = seg.r_outer - seg.r_inner
        if dense:
            nodes = max(8, int(round(config.report_nodes * span / total_span)))
            max_step = span / nodes
        else:
            max_step = span / 8.0
        n_buf = 8192
        while True:
            rs = np.empty(n_buf)
            ys = np.empty((n_buf, 4))
            status, n = _rk.integrate_segment(
                y, seg.r_inner, seg.r_outer, seg_mat.mu, seg_mat.jm,
                pressure / seg_mat.thickness, config.ode_rel_tol,
                config.ode_abs_tol, max_step, rs, ys,
            )
            if status != _rk.BUFFER_FULL:
                break
            n_buf *= 8
            if n_buf > 600_000:
                raise SingularRhs("integration node budget exhausted")
        trace.n_integrations += 1
        if status != _rk.OK:
            raise _STATUS_ERRORS[status](
                f"integration failed in segment [{seg.r_inner}, {seg.r_outer}] "
                f"({seg.kind}) at r = {rs[n - 1]:.3f}"
            )
        trace.rs.append(rs[:n])
        trace.ys.append(ys[:n].copy())
        y = ys[n - 1].copy()
        prev_mat = seg_mat
    return trace


def _trace_to_shape(trace: _Trace, design: MembraneDesign, pressure: float,
                    force: float, x: float, branch: int = 0) -> MembraneShape:
    rs = np.concatenate([seg[:-1] if i + 1 < len(trace.rs) else seg
                         for i, seg in enumerate(trace.rs)])
    ys = np.vstack([seg[:-1] if i + 1 < len(trace.ys) else seg
                    for i, seg in enumerate(trace.ys)])
    # The equilibrium equations advance z along the inflation direction,
    # which points opposite the reported lift axis; flip so the contact
    # disc sits at positive height with Z(rf) anchored to 0.
    z = ys[-1, 3] - ys[:, 3]
    return MembraneShape(
        r=rs,
        R=ys[:, 1] * rs,
        Z=z,
        l1=ys[:, 0],
        l2=ys[:, 1],
        beta=ys[:, 2],
        contact_height=z[0],
        pressure=pressure,
        force=force,
        x=x,
        branch=branch,
        n_integrations=trace.n_integrations,
        junction_residuals=tuple(trace.junction_residuals),
    )


def integrate_bvp(design: MembraneDesign, mat: MaterialParams, pressure: float,
                  force: float, x: float,
                  config: SolverConfig = DEFAULT_SOLVER,
                  dense: bool = True, branch: int = 0) -> MembraneShape:
    """Integrate a trial shape for initial stretch x (no shooting)."""
    trace = _integrate(design, mat, pressure, force, x, config, dense, branch)
    return _trace_to_shape(trace, design, pressure, force, x, branch)


def _flat_shape(design: MembraneDesign, config: SolverConfig) -> MembraneShape:
    r = np.linspace(design.contact_radius, design.outer_radius, config.report_nodes)
    ones = np.ones_like(r)
    zeros = np.zeros_like(r)
    return MembraneShape(r=r, R=r.copy(), Z=zeros.copy(), l1=ones, l2=ones.copy(),
                         beta=zeros.copy(), contact_height=0.0, pressure=0.0,
                         force=0.0, x=1.0)


def _x_min(design: MembraneDesign, mat: MaterialParams, pressure: float,
           force: float, x_max: float) -> float:
    """Smallest x with an admissible arcsin argument in the angle condition."""
    r0 = design.contact_radius
    num = -force + math.pi * pressure * r0 * r0
    if abs(num) < 1e-14:
        return 1.0 + 1e-9
    w1_req = abs(num) / (2.0 * math.pi * mat.thickness * r0)

    def f(x):
        return gent_derivatives(x, 1.0, mat).w1 - w1_req

    if f(x_max) < 0.0:
        raise ShootingFailed(
            f"required boundary tension unreachable below the extension limit "
            f"(p = {pressure} MPa, F = {force} N)"
        )
    return brentq(f, 1.0 + 1e-12, x_max, xtol=1e-13)


def solve_shape(design: MembraneDesign, mat: MaterialParams, pressure: float,
                force: float, config: SolverConfig = DEFAULT_SOLVER,
                x_init: float | None = None,
                branch_init: int = 0) -> MembraneShape:
    """Shooting solve: find x = l1(r0) such that l2(rf) = 1."""
    if pressure == 0.0 and force == 0.0:
        return _flat_shape(design, config)

    n_evals = 0
    _, x_hi_limit = _l1_bounds(1.0, mat.jm)
    x_max = x_hi_limit * 0.995
    x_lo = _x_min(design, mat, pressure, force, x_max)

    branches = (branch_init, 1 - branch_init)
    for branch in branches:

        def g(x: float, _b=branch) -> float:
            nonlocal n_evals
            n_evals += 1
            trace = _integrate(design, mat, pressure, force, x, config,
                               dense=False, branch=_b)
            return trace.ys[-1][-1, 1] - 1.0

        hint = x_init if branch == branch_init else None
        bracket = _find_bracket(g, x_lo, x_max, config, hint)
        if bracket is None:
            continue
        (xa, ga), (xb, gb) = bracket
        x_root = _bisect_with_failures(g, xa, ga, xb, gb, config)
        trace = _integrate(design, mat, pressure, force, x_root, config,
                           dense=True, branch=branch)
        shape = _trace_to_shape(trace, design, pressure, force, x_root, branch)
        shape.n_integrations = n_evals + 1
        if abs(shape.l2[-1] - 1.0) > 1e-6:
            continue
        return shape

    raise ShootingFailed(
        f"no shooting solution for p = {pressure} MPa, F = {force} N "
        f"({n_evals} integrations)"
    )


def _find_bracket(g, x_lo: float, x_max: float, config: SolverConfig,
                  x_init: float | None):
    """Scan for a sign change of g, optionally starting near a previous root."""

    def safe(x):
        try:
            return g(x)
        except (ExtensionLimitExceeded, SingularRhs, NoEquilibrium):
            return None

    if x_init is not None and x_lo < x_init < x_max:
        gi = safe(x_init)
        if gi is not None:
            for delta in (0.01, 0.05, 0.2):
                xa = max(x_lo * (1 + 1e-12), x_init * (1 - delta))
                xb = min(x_max, x_init * (1 + delta))
                ga, gb = safe(xa), safe(xb)
                if ga is not None and ga * gi <= 0.0:
                    return (xa, ga), (x_init, gi)
                if gb is not None and gb * gi <= 0.0:
                    return (x_init, gi), (xb, gb)

    # Quadratically-spaced scan, denser near the arcsin-admissibility edge.
    u = np.linspace(1e-3, 1.0, config.scan_points) ** 2
    xs = x_lo * (1 + 1e-10) + (x_max - x_lo * (1 + 1e-10)) * u
    prev = None
    for x in xs:
        val = safe(x)
        if val is None:
            prev = None
            continue
        if prev is not None and prev[1] * val <= 0.0:
            return prev, (x, val)
        prev = (x, val)
    return None


def _bisect_with_failures(g, xa, ga, xb, gb, config: SolverConfig) -> float:
    """Bisection on a bracket, tolerating occasional failed evaluations."""
    for _ in range(config.max_iter):
        if abs(xb - xa) < config.shoot_tol:
            break
        gm = None
        for frac in (0.5, 0.35, 0.65, 0.2, 0.8):
            xm = xa + frac * (xb - xa)
            try:
                gm = g(xm)
            except (ExtensionLimitExceeded, SingularRhs, NoEquilibrium):
                continue
            break
        if gm is None:
            raise ShootingFailed("bracket interior not integrable")
        if ga * gm <= 0.0:
            xb, gb = xm, gm
        else:
            xa, ga = xm, gm
    # Return the endpoint with the smaller residual.
    return xa if abs(ga) < abs(gb) else xb


def free_inflation_height(design: MembraneDesign, mat: MaterialParams,
                          pressure: float,
                          config: SolverConfig = DEFAULT_SOLVER,
                          x_init: float | None = None) -> float:
    return solve_shape(design, mat, pressure, 0.0, config, x_init=x_init).contact_height


class _HeightSolver:
    """Root-finds F at a height, keeping shooting warm starts across calls."""

    def __init__(self, design, mat, config):
        self.design = design
        self.mat = mat
        self.config = config
        self.x_hint: float | None = None
        self.branch_hint = 0

    def height(self, pressure: float, force: float) -> float:
        shape = solve_shape(self.design, self.mat, pressure, force,
                            self.config, x_init=self.x_hint,
                            branch_init=self.branch_hint)
        self.x_hint = shape.x
        self.branch_hint = shape.branch
        return shape.contact_height

    def force_at(self, pressure: float, h: float) -> float:
        if pressure <= 0.0:
            return 0.0
        cfg = self.config
        free_h = self.height(pressure, 0.0)
        if free_h < h:
            return 0.0  # membrane never reaches the plate
        if free_h - h <= cfg.height_tol_mm:
            return 0.0
        fa, ha = 0.0, free_h
        fb = max(1.0, math.pi * pressure * self.design.contact_radius ** 2)
        hb = None
        while fb <= cfg.f_cap_n:
            hb = self.height(pressure, fb)
            if hb < h:
                break
            fa, ha = fb, hb
            fb *= 2.0
        else:
            fb = cfg.f_cap_n
            hb = self.height(pressure, fb)
            if hb >= h:
                raise NotReachable(
                    f"height {h} mm not attainable with F <= {cfg.f_cap_n} N "
                    f"at p = {pressure} MPa"
                )
        # Bisect on F until the height residual is inside tolerance.
        for _ in range(cfg.max_iter):
            fm = 0.5 * (fa + fb)
            hm = self.height(pressure, fm)
            if abs(hm - h) <= cfg.height_tol_mm or (fb - fa) < 1e-6:
                return fm
            if hm > h:
                fa = fm
            else:
                fb = fm
        return 0.5 * (fa + fb)


def force_at_height(design: MembraneDesign, mat: MaterialParams, pressure: float,
                    h: float, config: SolverConfig = DEFAULT_SOLVER) -> float:
    """Contact force F >= 0 such that the plate sits at height h."""
    if h < 0:
        raise ValueError(f"height must be non-negative, got {h}")
    return _HeightSolver(design, mat, config).force_at(pressure, h)


@dataclass(frozen=True)
class SweepPoint:
    height_mm: float
    pressure_mpa: float
    force_n: float
    success: bool
    solver_iters: int
    error: str = ""


def sweep(design: MembraneDesign, mat: MaterialParams, heights: Sequence[float],
          pressures: Sequence[float],
          config: SolverConfig = DEFAULT_SOLVER) -> list[SweepPoint]:
    """Grid evaluation of force_at_height; failures are flagged, not raised.

    Output is ordered by the input height list, then the pressure list.
    """
    results: dict[tuple[int, int], SweepPoint] = {}
    for j, p in enumerate(pressures):
        solver = _HeightSolver(design, mat, config)
        # Descend in height so warm starts track increasing force.
        for i in sorted(range(len(heights)), key=lambda k: -heights[k]):
            h = heights[i]
            try:
                f = solver.force_at(p, h)
                results[(i, j)] = SweepPoint(h, p, f, True, 0)
            except (ShootingFailed, NoEquilibrium, NotReachable,
                    ExtensionLimitExceeded, SingularRhs) as exc:
                results[(i, j)] = SweepPoint(h, p, float("nan"), False, 0,
                                             type(exc).__name__)
    return [results[(i, j)] for i in range(len(heights))
            for j in range(len(pressures))]


def first_integral(shape: MembraneShape, design: MembraneDesign,
                   mat: MaterialParams,
                   config: SolverConfig = DEFAULT_SOLVER) -> np.ndarray:
    """Vertical force balance V(r) = 2 pi t r W1 sin(beta) + F - pi p R^2.

    Vanishes identically along an exact solution (and, by the tension
    matching condition, is continuous across ring junctions).
    """
    rmat = ring_material(mat, config)
    ring_spans = [(rg.inner_radius, rg.outer_radius) for rg in design.rings]
    vals = np.empty(shape.r.shape)
    for i, r in enumerate(shape.r):
        seg_mat = mat
        # Junction nodes carry the state of the segment that starts there,
        # so the inner edge counts as ring and the outer edge as silicone.
        for lo, hi in ring_spans:
            if lo <= r < hi:
                seg_mat = rmat
                break
        w1 = gent_derivatives(shape.l1[i], shape.l2[i], seg_mat).w1
        vals[i] = (2.0 * math.pi * seg_mat.thickness * r * w1
                   * math.sin(shape.beta[i])
                   + shape.force - math.pi * shape.pressure * shape.R[i] ** 2)
    return vals
