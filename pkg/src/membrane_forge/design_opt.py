"""Lift-trajectory prediction and goal-driven design optimization.

A force model here is anything exposing the raw-feature-row contract of
the surrogate: `predict(x)` returning forces (N) for rows laid out per
`dataset.FEATURE_NAMES`, and (for gradient-based search)
`predict_and_grad(x)` returning forces plus dF/d(row).  Adapters are
provided for the surrogate, the ensemble mean, and the shooting
simulator.

Heights are solved from the force model by bisection; the design
posterior differentiates through those solves with the implicit-function
rule dh/dM = -F_M / F_h.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .designs import DesignBox, MembraneDesign
from .ensemble import (
    RpnEnsemble,
    _bounds_for,
    _coords_to_design,
    _feasibility_penalty,
    _ring_count_classes,
    _sample_candidate,
    ensemble_predict,
)
from .errors import (
    AllStartsFailed,
    EmptyInput,
    ModelEvaluationFailed,
    TargetUnreachable,
)
from .surrogate import SurrogateModel, design_row, predict_batch, \
    predict_with_input_grad

G_MPS2 = 9.81
P_MAX_KPA = 10.0
H_MAX_MM = 50.0
FORCE_NORM_N = 40.0

_COORD_COLS = (0, 1, 2, 3, 5, 6)
_COL_H, _COL_P = 8, 9


# --- force-model adapters --------------------------------------------------

class SurrogateForce:
    def __init__(self, model: SurrogateModel):
        self.model = model

    def predict(self, x):
        return predict_batch(self.model, x)

    def predict_and_grad(self, x):
        return predict_with_input_grad(self.model, x)


class EnsembleMeanForce:
    def __init__(self, ens: RpnEnsemble):
        self.ens = ens

    def predict(self, x):
        return ensemble_predict(self.ens, x)[0]

    def predict_and_grad(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        fs, gs = [], []
        for m in self.ens.members:
            f, g = m.predict_with_input_grad(x)
            fs.append(f)
            gs.append(g)
        return np.mean(fs, axis=0), np.mean(gs, axis=0)


class SimulatorForce:
    """Shooting-solver-backed force model (no analytic input gradients)."""

    def __init__(self, material_for=None, solver=None):
        from .material import silicone_params
        from .sim import DEFAULT_SOLVER

        self.material_for = material_for or (
            lambda d: silicone_params(d.thickness))
        self.solver = solver or DEFAULT_SOLVER

    def predict(self, x):
        from .designs import Ring
        from .sim import force_at_height

        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty(x.shape[0])
        for i, row in enumerate(x):
            rings = []
            for (ci, wi, fi) in ((2, 3, 4), (5, 6, 7)):
                if row[fi] > 0.5:
                    rings.append(Ring(row[ci], row[wi]))
            design = MembraneDesign(contact_radius=row[1], thickness=row[0],
                                    rings=tuple(rings))
            try:
                out[i] = force_at_height(design, self.material_for(design),
                                         row[_COL_P] * 1e-3, row[_COL_H],
                                         self.solver)
            except Exception as exc:
                raise ModelEvaluationFailed(
                    f"simulator failed at h={row[_COL_H]:.2f} mm, "
                    f"p={row[_COL_P]:.2f} kPa: {exc}") from exc
        return out


# --- trajectories ----------------------------------------------------------

@dataclass(frozen=True)
class Waypoint:
    p_target_kpa: float
    h_target_mm: float

    def __post_init__(self):
        if not 0.0 <= self.p_target_kpa <= P_MAX_KPA:
            raise ValueError(
                f"waypoint pressure {self.p_target_kpa} outside "
                f"[0, {P_MAX_KPA}] kPa")
        if not 0.0 <= self.h_target_mm <= H_MAX_MM:
            raise ValueError(
                f"waypoint height {self.h_target_mm} outside "
                f"[0, {H_MAX_MM}] mm")


@dataclass(frozen=True)
class Trajectory:
    """Inflation sweep: ordered (pressure kPa, height mm, force N) samples."""

    samples: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        ps = [s[0] for s in self.samples]
        if any(b <= a for a, b in zip(ps, ps[1:])):
            raise ValueError("trajectory pressures must be strictly increasing")

    def pressures(self):
        return np.array([s[0] for s in self.samples])

    def heights(self):
        return np.array([s[1] for s in self.samples])


@dataclass(frozen=True)
class LiftTargets:
    """Three (force, pressure) goals plus posterior weights."""

    forces_n: tuple[float, float, float]
    pressures_kpa: tuple[float, float, float]
    k_force: float = 10.0
    k_pressure: float = 10.0
    k_height: float = 0.02
    gamma: float = 0.5

    def __post_init__(self):
        if min(self.k_force, self.k_pressure, self.k_height) <= 0:
            raise ValueError("posterior weights must be positive")
        if self.gamma <= 0:
            raise ValueError("smooth-min temperature must be positive")


def targets_from_masses(masses_kg: Sequence[float],
                        pressures_kpa: Sequence[float],
                        **weights) -> LiftTargets:
    return LiftTargets(
        forces_n=tuple(m * G_MPS2 for m in masses_kg),
        pressures_kpa=tuple(pressures_kpa), **weights)


def _solve_heights(model, design: MembraneDesign, pressures: np.ndarray,
                   forces: np.ndarray, n_iter: int = 60):
    """Vectorized bisection for h in [0, H_MAX_MM] with F(M, h, p) = F_target.

    Assumes force is decreasing in height (contact force relaxes as the
    object rises).  Targets below the force at h_max clamp to h_max;
    targets above the force at h = 0 clamp to 0 (not yet lifted).
    Returns (heights, achieved forces, interior-root mask).
    """
    n = len(pressures)
    rows = np.stack([design_row(design, 0.0, p) for p in pressures])
    lo = np.zeros(n)
    hi = np.full(n, H_MAX_MM)

    def f_at(h):
        r = rows.copy()
        r[:, _COL_H] = h
        return model.predict(r)

    f_lo = f_at(lo)
    f_hi = f_at(hi)
    interior = (f_lo >= forces) & (f_hi <= forces)
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        f_mid = f_at(mid)
        go_up = f_mid >= forces  # force still above target: raise height
        lo = np.where(interior & go_up, mid, lo)
        hi = np.where(interior & ~go_up, mid, hi)
    h = 0.5 * (lo + hi)
    h = np.where(interior, h, np.where(f_lo < forces, 0.0, H_MAX_MM))
    return h, f_at(h), interior


def lift_trajectory(model, design: MembraneDesign, mass_kg: float,
                    pressures_kpa: Sequence[float]) -> Trajectory:
    """Height the object of the given mass sits at for each pressure."""
    if mass_kg <= 0:
        raise ValueError(f"mass must be positive, got {mass_kg}")
    ps = np.asarray(sorted(pressures_kpa), dtype=float)
    target = mass_kg * G_MPS2
    h, f, _ = _solve_heights(model, design, ps, np.full(len(ps), target))
    return Trajectory(tuple(
        (float(p), float(hh), float(ff)) for p, hh, ff in zip(ps, h, f)))


def trajectory_rmse(traj: Trajectory, waypoints: Sequence[Waypoint],
                    p_max_kpa: float = P_MAX_KPA,
                    h_max_mm: float = H_MAX_MM) -> float:
    """Scaled waypoint error: per waypoint, the trajectory sample with the
    smallest ((p-p_t)/p_max)^2 + ((h-h_t)/h_max)^2 contributes that
    minimum; the result is the square root of the mean contribution."""
    if not traj.samples or not waypoints:
        raise EmptyInput("trajectory and waypoints must be non-empty")
    ps = traj.pressures()
    hs = traj.heights()
    minima = []
    for w in waypoints:
        d2 = ((ps - w.p_target_kpa) / p_max_kpa) ** 2 \
            + ((hs - w.h_target_mm) / h_max_mm) ** 2
        minima.append(d2.min())
    # sorted accumulation keeps the result exactly waypoint-order-invariant
    return float(np.sqrt(np.mean(np.sort(minima))))


# --- posterior -------------------------------------------------------------

@dataclass
class PosteriorResult:
    value: float
    heights_mm: tuple[float, ...]
    f_error: float
    p_error: float
    h_min: float
    unreachable: tuple[bool, ...]


def _smooth_min(h: np.ndarray, gamma: float) -> tuple[float, np.ndarray]:
    """LogSumExp soft minimum and its gradient in h."""
    z = -gamma * h
    zmax = z.max()
    e = np.exp(z - zmax)
    s = e.sum()
    value = -(zmax + np.log(s)) / gamma
    return float(value), e / s


def posterior(model, design: MembraneDesign, targets: LiftTargets,
              strict: bool = False) -> PosteriorResult:
    """Design score: high when the target forces are reached at the target
    pressures and at generous heights.

    For each (force, pressure) goal the height is solved on the model;
    goals outside the reachable force range clamp to the height boundary
    and pay a scaled squared force error, which is the "large penalty"
    that keeps optimization going (or raises TargetUnreachable when
    strict)."""
    ps = np.asarray(targets.pressures_kpa, dtype=float)
    fs = np.asarray(targets.forces_n, dtype=float)
    h, f_ach, interior = _solve_heights(model, design, ps, fs)
    if strict and not interior.all():
        bad = [f"{fs[i]:.3g} N @ {ps[i]:.3g} kPa"
               for i in range(len(fs)) if not interior[i]]
        raise TargetUnreachable(f"unreachable force targets: {bad}")
    f_err = float(np.sum(((f_ach - fs) / FORCE_NORM_N) ** 2))
    p_err = 0.0  # heights are solved at the target pressures exactly
    h_min, _ = _smooth_min(h, targets.gamma)
    value = (-targets.k_force * f_err - targets.k_pressure * p_err
             + targets.k_height * h_min)
    return PosteriorResult(value=value, heights_mm=tuple(float(v) for v in h),
                           f_error=f_err, p_error=p_err, h_min=h_min,
                           unreachable=tuple(bool(not i) for i in interior))


def _posterior_and_grad(model, coords: np.ndarray, n_rings: int,
                        targets: LiftTargets, box: DesignBox):
    """Posterior and its gradient in the continuous design coordinates.

    Interior height solves differentiate implicitly: dh/dM = -F_M / F_h.
    Boundary-clamped solves hold h fixed, so only the force error moves.
    """
    design = _coords_to_design(coords, n_rings, box)
    if design is None:
        return None, None
    res = posterior(model, design, targets)
    ps = np.asarray(targets.pressures_kpa, dtype=float)
    fs = np.asarray(targets.forces_n, dtype=float)
    rows = np.stack([design_row(design, h, p)
                     for h, p in zip(res.heights_mm, ps)])
    f, dx = model.predict_and_grad(rows)
    cols = _COORD_COLS[:2 + 2 * n_rings]
    f_m = dx[:, cols]                      # (3, n_coords)
    f_h = dx[:, _COL_H]
    f_h = np.where(np.abs(f_h) < 1e-9, np.sign(f_h + 1e-30) * 1e-9, f_h)
    interior = ~np.asarray(res.unreachable)

    h = np.asarray(res.heights_mm)
    _, w_soft = _smooth_min(h, targets.gamma)
    dh_dm = np.where(interior[:, None], -f_m / f_h[:, None], 0.0)
    grad = targets.k_height * (w_soft[:, None] * dh_dm).sum(axis=0)
    # boundary-clamped targets: force error responds directly to the design
    df = (f - fs) / FORCE_NORM_N ** 2
    grad -= targets.k_force * 2.0 * (
        (~interior)[:, None] * df[:, None] * f_m).sum(axis=0)
    return res.value, grad


@dataclass
class DesignOptResult:
    design: MembraneDesign
    value: float
    posterior: PosteriorResult
    n_starts_evaluated: int = 0


def optimize_design(model, targets: LiftTargets, box: DesignBox,
                    n_starts: int = 2500, seed: int = 0,
                    maxiter: int = 40) -> DesignOptResult:
    """Seeded multistart bounded ascent of the posterior over the box,
    enumerated per ring count.  Every evaluated start and optimized point
    competes after projection to a feasible design."""
    classes = [c[0] for c in _ring_count_classes(box.ring_counts, 1)]
    starts_per_class = max(1, n_starts // len(classes))
    rng = np.random.default_rng(seed)
    best: DesignOptResult | None = None
    n_eval = 0

    def consider(coords, n_rings):
        nonlocal best
        d = _coords_to_design(np.asarray(coords), n_rings, box)
        if d is None:
            return
        res = posterior(model, d, targets)
        if best is None or res.value > best.value:
            best = DesignOptResult(design=d, value=res.value, posterior=res)

    for n_rings in classes:
        bounds = _bounds_for(n_rings, box)

        def objective(theta):
            value, grad = _posterior_and_grad(model, theta, n_rings,
                                              targets, box)
            pen, pgrad = _feasibility_penalty(theta, n_rings, box)
            if value is None:
                return 1e6 + pen, pgrad
            return -value + pen, -grad + pgrad

        for _ in range(starts_per_class):
            x0 = _sample_candidate(rng, n_rings, box)
            consider(x0, n_rings)
            n_eval += 1
            try:
                opt = minimize(objective, x0, jac=True, method="L-BFGS-B",
                               bounds=bounds, options={"maxiter": maxiter})
            except FloatingPointError:
                continue
            consider(opt.x, n_rings)

    if best is None:
        raise AllStartsFailed("no feasible design found from any start")
    best.n_starts_evaluated = n_eval
    return best


# --- lift scoring ----------------------------------------------------------

@dataclass
class HeightScore:
    score_mm: float
    heights_mm: tuple[float, ...]
    failed: tuple[bool, ...]


def height_score(trajectories: Sequence[Trajectory],
                 pressures_kpa: Sequence[float]) -> HeightScore:
    """Sum of lifted heights, one per (trajectory, target pressure) pair.

    The sample nearest each target pressure supplies the height; a height
    of zero means the object was never lifted at that pressure and is
    flagged as a failure contributing nothing."""
    heights, failed = [], []
    for traj, p_t in zip(trajectories, pressures_kpa):
        ps = traj.pressures()
        i = int(np.argmin(np.abs(ps - p_t)))
        h = traj.samples[i][1]
        if h <= 0.0:
            heights.append(0.0)
            failed.append(True)
        else:
            heights.append(float(h))
            failed.append(False)
    return HeightScore(score_mm=float(sum(heights)),
                       heights_mm=tuple(heights), failed=tuple(failed))
