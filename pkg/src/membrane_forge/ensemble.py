"""Randomized-prior ensembles, the disagreement acquisition, and the
active-learning loop.

Each member pairs a frozen randomly initialized "prior" network with a
trainable network; the member prediction is trainable(x) + prior_scale *
prior(x).  Training fits the trainable part to the residual between the
data and the scaled prior, so members with different priors disagree away
from the data — the spread across members is the epistemic uncertainty.

The acquisition score for a batch of candidate designs sums, over
members, the largest (across candidates) root-sum-square deviation of
that member from the ensemble mean on a fixed (height, pressure) grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .dataset import Dataset, NormStats, compute_norm_stats
from .designs import DesignBox, MembraneDesign, Ring
from .errors import AllStartsFailed, ConfigError
from .surrogate import (
    ModelConfig,
    SurrogateModel,
    init_params,
    predict_batch,
    predict_with_input_grad,
    train,
)

MAX_GRID_HEIGHT_MM = 50.0
MAX_GRID_PRESSURE_KPA = 10.0

# clearance used when projecting optimizer iterates onto feasible designs
_RING_GAP_MM = 0.25


@dataclass(frozen=True)
class AcquisitionGrid:
    heights_mm: tuple[float, ...] = (5.0, 20.0, 35.0, 50.0)
    pressures_kpa: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0)

    def __post_init__(self):
        if not self.heights_mm or not self.pressures_kpa:
            raise ConfigError("acquisition grid must be non-empty")
        if max(self.heights_mm) > MAX_GRID_HEIGHT_MM or min(self.heights_mm) < 0:
            raise ConfigError(
                f"grid heights must lie in [0, {MAX_GRID_HEIGHT_MM}] mm")
        if (max(self.pressures_kpa) > MAX_GRID_PRESSURE_KPA
                or min(self.pressures_kpa) < 0):
            raise ConfigError(
                f"grid pressures must lie in [0, {MAX_GRID_PRESSURE_KPA}] kPa")

    def n_points(self) -> int:
        return len(self.heights_mm) * len(self.pressures_kpa)


@dataclass
class RpnMember:
    prior: SurrogateModel  # frozen after construction
    trainable: SurrogateModel
    prior_scale: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (predict_batch(self.trainable, x)
                + self.prior_scale * predict_batch(self.prior, x))

    def predict_with_input_grad(self, x: np.ndarray):
        f_t, d_t = predict_with_input_grad(self.trainable, x)
        f_p, d_p = predict_with_input_grad(self.prior, x)
        return f_t + self.prior_scale * f_p, d_t + self.prior_scale * d_p


@dataclass
class RpnEnsemble:
    members: list[RpnMember]
    config: ModelConfig
    stats: NormStats
    prior_scale: float

    def __post_init__(self):
        if len(self.members) < 1:
            raise ConfigError("ensemble needs at least one member")


def _member_seeds(seed: int, i: int) -> tuple[int, int, int]:
    """(prior init, trainable init, bootstrap) seeds for member i."""
    base = seed * 10_000 + i * 3
    return base + 1, base + 2, base + 3


def build_ensemble(
    cfg: ModelConfig,
    train_ds: Dataset,
    val_ds: Dataset,
    n_members: int = 8,
    prior_scale: float = 1.0,
    seed: int = 0,
    **train_kwargs,
) -> RpnEnsemble:
    """Train an ensemble from scratch.

    Members share NormStats and config; they differ by prior seed,
    trainable init seed, and a bootstrap resample of the training rows.
    """
    stats = compute_norm_stats(train_ds)
    members = []
    for i in range(n_members):
        prior_seed, init_seed, boot_seed = _member_seeds(seed, i)
        prior = SurrogateModel(cfg, stats, init_params(cfg, prior_seed))

        def residual_targets(x, f, _prior=prior):
            return f - prior_scale * predict_batch(_prior, x)

        res = train(cfg, train_ds, val_ds, stats=stats,
                    init_seed=init_seed, bootstrap_seed=boot_seed,
                    target_fn=residual_targets, **train_kwargs)
        members.append(RpnMember(prior, res.model, prior_scale))
    return RpnEnsemble(members, cfg, stats, prior_scale)


def retrain_ensemble(ens: RpnEnsemble, train_ds: Dataset, val_ds: Dataset,
                     seed: int = 0, **train_kwargs) -> RpnEnsemble:
    """Refit every trainable network on new data; priors are reused as-is."""
    stats = ens.stats
    members = []
    for i, old in enumerate(ens.members):
        _, init_seed, boot_seed = _member_seeds(seed, i)

        def residual_targets(x, f, _prior=old.prior):
            return f - ens.prior_scale * predict_batch(_prior, x)

        res = train(ens.config, train_ds, val_ds, stats=stats,
                    init_seed=init_seed, bootstrap_seed=boot_seed,
                    target_fn=residual_targets, **train_kwargs)
        members.append(RpnMember(old.prior, res.model, ens.prior_scale))
    return RpnEnsemble(members, ens.config, stats, ens.prior_scale)


def member_matrix(ens: RpnEnsemble, x: np.ndarray) -> np.ndarray:
    """(n_members, n_rows) member predictions on raw feature rows."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.stack([m.predict(x) for m in ens.members])


def ensemble_predict(ens: RpnEnsemble, x: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Mean force and population standard deviation across members."""
    preds = member_matrix(ens, x)
    return preds.mean(axis=0), preds.std(axis=0)


def ensemble_predict_design(ens: RpnEnsemble, design: MembraneDesign,
                            height_mm: float, p_kpa: float
                            ) -> tuple[float, float]:
    from .surrogate import design_row

    mean, sd = ensemble_predict(ens, design_row(design, height_mm, p_kpa))
    return float(mean[0]), float(sd[0])


# --- candidate parameterization for gradient-based search ------------------

def _grid_rows(coords: np.ndarray, n_rings: int, grid: AcquisitionGrid
               ) -> np.ndarray:
    """Raw feature rows for one candidate at every grid point.

    coords = [t, r0, c1, w1, (c2, w2)] with n_rings ring pairs present.
    """
    hh, pp = np.meshgrid(grid.heights_mm, grid.pressures_kpa, indexing="ij")
    g = hh.size
    x = np.zeros((g, 10))
    x[:, 0] = coords[0]
    x[:, 1] = coords[1]
    for i in range(n_rings):
        ci, wi, fi = (2, 3, 4) if i == 0 else (5, 6, 7)
        x[:, ci] = coords[2 + 2 * i]
        x[:, wi] = coords[3 + 2 * i]
        x[:, fi] = 1.0
    x[:, 8] = hh.ravel()
    x[:, 9] = pp.ravel()
    return x


_COORD_COLS = (0, 1, 2, 3, 5, 6)  # feature columns per coordinate slot


def _alpha_and_grads(ens: RpnEnsemble, cand: Sequence[tuple[np.ndarray, int]],
                     grid: AcquisitionGrid):
    """Acquisition value and its gradient per candidate coordinate vector."""
    n_mem = len(ens.members)
    preds, grads = [], []
    for coords, n_rings in cand:
        x = _grid_rows(coords, n_rings, grid)
        p_k, g_k = [], []
        for m in ens.members:
            f, dx = m.predict_with_input_grad(x)
            p_k.append(f)
            g_k.append(dx[:, _COORD_COLS[:2 + 2 * n_rings]])
        preds.append(np.stack(p_k))    # (N, G)
        grads.append(np.stack(g_k))    # (N, G, n_coords)
    mu = [p.mean(axis=0) for p in preds]                    # per candidate (G,)
    dev = np.stack([np.sqrt(((mu[k] - preds[k]) ** 2).sum(axis=1))
                    for k in range(len(cand))], axis=1)     # (N, n_cand)
    pick = dev.argmax(axis=1)                               # (N,)
    alpha = float(dev[np.arange(n_mem), pick].sum())

    coord_grads = [np.zeros(len(c)) for c, _ in cand]
    for l in range(n_mem):
        k = pick[l]
        d = dev[l, k]
        if d < 1e-12:
            continue
        resid = mu[k] - preds[k][l]                         # (G,)
        dmu = grads[k].mean(axis=0)                         # (G, n_coords)
        coord_grads[k] += (resid[:, None] * (dmu - grads[k][l])).sum(axis=0) / d
    return alpha, coord_grads


def acquisition(ens: RpnEnsemble, designs: Sequence[MembraneDesign],
                grid: AcquisitionGrid) -> float:
    """Disagreement score for a batch of candidate designs.

    Per member, the root-sum-square deviation from the ensemble mean over
    the grid is maximized across candidates, then summed over members.
    """
    cand = []
    for d in designs:
        coords = [d.thickness, d.contact_radius]
        for rg in d.rings:
            coords += [rg.center_radius, rg.half_width]
        cand.append((np.asarray(coords), len(d.rings)))
    alpha, _ = _alpha_and_grads(ens, cand, grid)
    return alpha


def _coords_to_design(coords: np.ndarray, n_rings: int, box: DesignBox
                      ) -> MembraneDesign | None:
    """Project raw optimizer coordinates onto a feasible design, or None."""
    t = float(np.clip(coords[0], *box.thickness))
    r0 = float(np.clip(coords[1], *box.contact_radius))
    pairs = sorted(
        (float(coords[2 + 2 * i]), float(coords[3 + 2 * i]))
        for i in range(n_rings)
    )
    rings = []
    cursor = r0 + _RING_GAP_MM
    for c, w in pairs:
        w = float(np.clip(w, *box.ring_half_width))
        c = float(np.clip(c, *box.ring_center))
        c = max(c, cursor + w)
        c = min(c, box.outer_radius - _RING_GAP_MM - w)
        if c - w <= cursor - _RING_GAP_MM / 2:
            return None
        rings.append(Ring(c, w))
        cursor = c + w + _RING_GAP_MM
    try:
        return MembraneDesign(contact_radius=r0, thickness=t,
                              rings=tuple(rings))
    except ValueError:
        return None


def _feasibility_penalty(coords: np.ndarray, n_rings: int, box: DesignBox,
                         weight: float = 50.0):
    """Quadratic hinge penalty for ring-clearance constraints + gradient."""
    pen = 0.0
    grad = np.zeros(len(coords))
    r0 = coords[1]
    order = sorted(range(n_rings), key=lambda i: coords[2 + 2 * i])
    cursor_val, cursor_idx = r0 + _RING_GAP_MM, [(1, 1.0)]
    for i in order:
        ci, wi = 2 + 2 * i, 3 + 2 * i
        inner = coords[ci] - coords[wi]
        gap = cursor_val - inner
        if gap > 0:
            pen += weight * gap * gap
            for j, s in cursor_idx:
                grad[j] += 2 * weight * gap * s
            grad[ci] -= 2 * weight * gap
            grad[wi] += 2 * weight * gap
        outer = coords[ci] + coords[wi]
        over = outer - (box.outer_radius - _RING_GAP_MM)
        if over > 0:
            pen += weight * over * over
            grad[ci] += 2 * weight * over
            grad[wi] += 2 * weight * over
        cursor_val = outer + _RING_GAP_MM
        cursor_idx = [(ci, 1.0), (wi, 1.0)]
    return pen, grad


def _bounds_for(n_rings: int, box: DesignBox) -> list[tuple[float, float]]:
    b = [box.thickness, box.contact_radius]
    for _ in range(n_rings):
        b += [box.ring_center, box.ring_half_width]
    return b


def _sample_candidate(rng: np.random.Generator, n_rings: int, box: DesignBox,
                      max_tries: int = 200) -> np.ndarray:
    """Uniform feasible start within the box."""
    bounds = _bounds_for(n_rings, box)
    for _ in range(max_tries):
        coords = np.array([rng.uniform(lo, hi) for lo, hi in bounds])
        if _coords_to_design(coords, n_rings, box) is not None:
            return coords
    return coords  # let the penalty and projection handle it


def _ring_count_classes(counts: Sequence[int], q: int) -> list[tuple[int, ...]]:
    """Unordered ring-count combinations for a batch of q candidates."""
    from itertools import combinations_with_replacement

    return list(combinations_with_replacement(sorted(set(counts)), q))


@dataclass
class AcquisitionResult:
    designs: list[MembraneDesign]
    alpha: float
    degenerate: bool = False
    n_starts_evaluated: int = 0


def maximize_acquisition(
    ens: RpnEnsemble,
    box: DesignBox,
    grid: AcquisitionGrid,
    q: int = 2,
    n_starts: int = 64,
    seed: int = 0,
    maxiter: int = 60,
) -> AcquisitionResult:
    """Multistart bounded quasi-Newton ascent of the acquisition.

    The ring-presence flags are discrete, so the ascent runs separately
    for every unordered ring-count combination of the q candidates and
    the best feasible batch wins.  Every evaluated point (starts and
    optimized iterates, after projection to feasibility) competes, so the
    returned score is at least the score at every start.
    """
    classes = _ring_count_classes(box.ring_counts, q)
    starts_per_class = max(1, n_starts // len(classes))
    rng = np.random.default_rng(seed)
    best: AcquisitionResult | None = None
    n_eval = 0

    def consider(coords_list, counts):
        nonlocal best
        designs = []
        for coords, n_rings in zip(coords_list, counts):
            d = _coords_to_design(np.asarray(coords), n_rings, box)
            if d is None:
                return
        # rebuild with projected coordinates so the score matches the designs
        designs = [_coords_to_design(np.asarray(c), n, box)
                   for c, n in zip(coords_list, counts)]
        a = acquisition(ens, designs, grid)
        if best is None or a > best.alpha:
            best = AcquisitionResult(designs, a)

    for counts in classes:
        sizes = [2 + 2 * n for n in counts]
        splits = np.cumsum(sizes)[:-1]
        bounds = [b for n in counts for b in _bounds_for(n, box)]

        def objective(theta):
            parts = np.split(theta, splits)
            cand = list(zip(parts, counts))
            alpha, cgrads = _alpha_and_grads(ens, cand, grid)
            pen, pgrad_all = 0.0, []
            for part, n in zip(parts, counts):
                p, g = _feasibility_penalty(part, n, box)
                pen += p
                pgrad_all.append(g)
            grad = np.concatenate(cgrads)
            return -alpha + pen, -grad + np.concatenate(pgrad_all)

        for _ in range(starts_per_class):
            x0 = np.concatenate(
                [_sample_candidate(rng, n, box) for n in counts])
            consider(np.split(x0, splits), counts)
            n_eval += 1
            try:
                res = minimize(objective, x0, jac=True, method="L-BFGS-B",
                               bounds=bounds, options={"maxiter": maxiter})
            except FloatingPointError:
                continue
            consider(np.split(res.x, splits), counts)

    if best is None:
        raise AllStartsFailed(
            "no feasible candidate batch found from any start")
    best.degenerate = best.alpha <= 1e-9
    best.n_starts_evaluated = n_eval
    return best


@dataclass
class ALStepResult:
    dataset: Dataset
    ensemble: RpnEnsemble
    proposed: list[MembraneDesign]
    alpha: float
    n_new_records: int
    oracle_failures: list[tuple[str, str]] = field(default_factory=list)


def al_iteration(
    ens: RpnEnsemble,
    box: DesignBox,
    grid: AcquisitionGrid,
    oracle: Callable[[MembraneDesign], Sequence],
    ds: Dataset,
    val_ds: Dataset,
    q: int = 2,
    n_starts: int = 64,
    seed: int = 0,
    **train_kwargs,
) -> ALStepResult:
    """One active-learning step: propose q designs, query the oracle,
    append the returned records, retrain all members."""
    acq = maximize_acquisition(ens, box, grid, q=q, n_starts=n_starts,
                               seed=seed)
    new_records, failures = [], []
    for d in acq.designs:
        try:
            new_records.extend(oracle(d))
        except Exception as exc:  # record and continue with the rest
            failures.append((d.key(), str(exc)))
    ds2 = ds.merged_with(Dataset(new_records))
    ens2 = retrain_ensemble(ens, ds2, val_ds, seed=seed, **train_kwargs)
    return ALStepResult(dataset=ds2, ensemble=ens2, proposed=acq.designs,
                        alpha=acq.alpha, n_new_records=len(new_records),
                        oracle_failures=failures)


def mean_grid_uncertainty(ens: RpnEnsemble,
                          designs: Sequence[MembraneDesign],
                          grid: AcquisitionGrid) -> float:
    """Ensemble standard deviation averaged over designs and grid points."""
    from .surrogate import design_row

    rows = []
    for d in designs:
        for h in grid.heights_mm:
            for p in grid.pressures_kpa:
                rows.append(design_row(d, h, p))
    _, sd = ensemble_predict(ens, np.array(rows))
    return float(sd.mean())
