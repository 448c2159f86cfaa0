"""Learned force model for strain-limited membranes.

Architecture: a per-ring encoder (shared weights) maps each ring slot's
normalized (center, half-width, presence) triple to a latent vector; the
two latents are summed, which makes predictions exactly invariant to ring
ordering because float addition commutes.  The summed latent is
concatenated with normalized (thickness, contact radius, height) and fed
through a tanh MLP trunk whose output is the coefficient vector of a
polynomial in normalized pressure; evaluating that polynomial and
de-normalizing gives the force in N.

All gradients (parameters and inputs) are analytic reverse-mode, so the
model can serve as a differentiable force oracle for acquisition and
design optimization.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, NormStats, compute_norm_stats
from .designs import MembraneDesign
from .errors import (
    ConfigError,
    Divergence,
    EmptyBatch,
    EmptyDataset,
    InvariantViolation,
    RankDeficient,
)

_ACTIVATIONS = ("tanh", "relu")

# Column indices into the flattened feature rows (see dataset.FEATURE_NAMES).
_COL_T, _COL_R0 = 0, 1
_RING_SLOTS = ((2, 3, 4), (5, 6, 7))
_COL_H, _COL_P = 8, 9


@dataclass(frozen=True)
class ModelConfig:
    mlp_depth: int = 3
    mlp_width: int = 64
    ring_latent_dim: int = 12
    poly_degree: int = 1
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.mlp_depth < 1:
            raise ConfigError(f"mlp_depth must be >= 1, got {self.mlp_depth}")
        if self.mlp_width < 1:
            raise ConfigError(f"mlp_width must be >= 1, got {self.mlp_width}")
        if self.ring_latent_dim < 1:
            raise ConfigError(
                f"ring_latent_dim must be >= 1, got {self.ring_latent_dim}")
        if self.poly_degree not in (1, 2, 3):
            raise ConfigError(
                f"poly_degree must be 1, 2, or 3, got {self.poly_degree}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(
                f"activation must be one of {_ACTIVATIONS}, got {self.activation}")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter layout; iteration order defines the flat vector."""
    lat, width, d = cfg.ring_latent_dim, cfg.mlp_width, cfg.poly_degree
    shapes: dict[str, tuple[int, ...]] = {
        "enc_w1": (3, lat), "enc_b1": (lat,),
        "enc_w2": (lat, lat), "enc_b2": (lat,),
    }
    fan_in = 3 + lat
    for i in range(cfg.mlp_depth):
        shapes[f"trunk_w{i}"] = (fan_in, width)
        shapes[f"trunk_b{i}"] = (width,)
        fan_in = width
    shapes["out_w"] = (fan_in, d + 1)
    shapes["out_b"] = (d + 1,)
    return shapes


def init_params(cfg: ModelConfig, seed: int | None = None
                ) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, seeded."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, shape)
    return params


def flatten_params(params: dict[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    return np.concatenate([params[n].ravel() for n in param_shapes(cfg)])


def unflatten_params(vec: np.ndarray, cfg: ModelConfig) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for name, shape in param_shapes(cfg).items():
        n = int(np.prod(shape))
        out[name] = vec[pos:pos + n].reshape(shape).copy()
        pos += n
    if pos != vec.size:
        raise ConfigError(f"parameter vector length {vec.size}, expected {pos}")
    return out


@dataclass
class SurrogateModel:
    config: ModelConfig
    stats: NormStats
    params: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(self.params) != set(shapes):
            raise ConfigError("parameter names do not match the config layout")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ConfigError(
                    f"parameter {name} has shape {self.params[name].shape}, "
                    f"expected {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise InvariantViolation(f"non-finite values in parameter {name}")


def _act(z: np.ndarray, name: str) -> np.ndarray:
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _dact(z: np.ndarray, y: np.ndarray, name: str) -> np.ndarray:
    return 1.0 - y * y if name == "tanh" else (z > 0).astype(float)


def design_row(design: MembraneDesign, height_mm: float, p_kpa: float
               ) -> np.ndarray:
    """One raw feature row in the dataset's flattened column order."""
    cols = [design.thickness, design.contact_radius]
    for i in range(2):
        if i < len(design.rings):
            rg = design.rings[i]
            cols += [rg.center_radius, rg.half_width, 1.0]
        else:
            cols += [0.0, 0.0, 0.0]
    cols += [height_mm, p_kpa]
    return np.array(cols, dtype=float)


def _normalize_inputs(stats: NormStats, x: np.ndarray):
    """Split raw rows into normalized scalar, ring-slot, and pressure parts.

    Absent ring slots come out exactly (0, 0, 0): the presence flag gates
    the normalized geometry, so absence is presence-flag zero everywhere.
    """
    mean = np.asarray(stats.mean)
    std = np.asarray(stats.std)
    scal_idx = [_COL_T, _COL_R0, _COL_H]
    scal = (x[:, scal_idx] - mean[scal_idx]) / std[scal_idx]
    slots = []
    for (ci, wi, fi) in _RING_SLOTS:
        pres = x[:, fi]
        z = np.stack([
            pres * (x[:, ci] - mean[ci]) / std[ci],
            pres * (x[:, wi] - mean[wi]) / std[wi],
            pres,
        ], axis=1)
        slots.append(z)
    p_n = (x[:, _COL_P] - mean[_COL_P]) / std[_COL_P]
    return scal, slots, p_n


def _forward(model: SurrogateModel, x: np.ndarray):
    """Batched force prediction with a cache for reverse mode."""
    cfg, stats, pr = model.config, model.stats, model.params
    scal, slots, p_n = _normalize_inputs(stats, x)
    act = cfg.activation

    enc_cache = []
    latent = 0.0
    for z in slots:
        a1 = z @ pr["enc_w1"] + pr["enc_b1"]
        h1 = _act(a1, act)
        e = h1 @ pr["enc_w2"] + pr["enc_b2"]
        enc_cache.append((z, a1, h1))
        latent = latent + e

    trunk_in = np.concatenate([scal, latent], axis=1)
    h = trunk_in
    trunk_cache = []
    for i in range(cfg.mlp_depth):
        a = h @ pr[f"trunk_w{i}"] + pr[f"trunk_b{i}"]
        y = _act(a, act)
        trunk_cache.append((h, a, y))
        h = y
    coeffs = h @ pr["out_w"] + pr["out_b"]  # (n, d+1)

    powers = np.stack([p_n ** k for k in range(cfg.poly_degree + 1)], axis=1)
    f_norm = np.sum(coeffs * powers, axis=1)
    f = f_norm * stats.f_std + stats.f_mean
    cache = (x, scal, slots, p_n, enc_cache, trunk_cache, h, coeffs, powers)
    return f, cache


def _backward(model: SurrogateModel, cache, df: np.ndarray):
    """Reverse pass from dL/dF; returns (param grads, raw-input grads)."""
    cfg, stats, pr = model.config, model.stats, model.params
    x, scal, slots, p_n, enc_cache, trunk_cache, h_last, coeffs, powers = cache
    act = cfg.activation
    grads = {name: np.zeros_like(val) for name, val in pr.items()}

    df_norm = df * stats.f_std
    d_coeffs = df_norm[:, None] * powers
    ks = np.arange(1, cfg.poly_degree + 1)
    d_pn = df_norm * np.sum(coeffs[:, 1:] * ks * powers[:, :-1][:, :len(ks)],
                            axis=1)

    grads["out_w"] += h_last.T @ d_coeffs
    grads["out_b"] += d_coeffs.sum(axis=0)
    d_h = d_coeffs @ pr["out_w"].T
    for i in reversed(range(cfg.mlp_depth)):
        h_in, a, y = trunk_cache[i]
        d_a = d_h * _dact(a, y, act)
        grads[f"trunk_w{i}"] += h_in.T @ d_a
        grads[f"trunk_b{i}"] += d_a.sum(axis=0)
        d_h = d_a @ pr[f"trunk_w{i}"].T

    d_scal = d_h[:, :3]
    d_latent = d_h[:, 3:]
    d_slots = []
    for (z, a1, h1) in enc_cache:
        grads["enc_w2"] += h1.T @ d_latent
        grads["enc_b2"] += d_latent.sum(axis=0)
        d_h1 = d_latent @ pr["enc_w2"].T
        d_a1 = d_h1 * _dact(a1, h1, act)
        grads["enc_w1"] += z.T @ d_a1
        grads["enc_b1"] += d_a1.sum(axis=0)
        d_slots.append(d_a1 @ pr["enc_w1"].T)

    mean = np.asarray(stats.mean)
    std = np.asarray(stats.std)
    dx = np.zeros_like(x)
    for j, col in enumerate((_COL_T, _COL_R0, _COL_H)):
        dx[:, col] = d_scal[:, j] / std[col]
    for (ci, wi, fi), dz in zip(_RING_SLOTS, d_slots):
        pres = x[:, fi]
        dx[:, ci] = dz[:, 0] * pres / std[ci]
        dx[:, wi] = dz[:, 1] * pres / std[wi]
        dx[:, fi] = (dz[:, 0] * (x[:, ci] - mean[ci]) / std[ci]
                     + dz[:, 1] * (x[:, wi] - mean[wi]) / std[wi]
                     + dz[:, 2])
    dx[:, _COL_P] = d_pn / std[_COL_P]
    return grads, dx


def encode_rings(model: SurrogateModel, design: MembraneDesign) -> np.ndarray:
    """Summed latent encoding of the (up to two) ring slots."""
    x = design_row(design, 0.0, 0.0)[None, :]
    _, slots, _ = _normalize_inputs(model.stats, x)
    pr, act = model.params, model.config.activation
    latent = np.zeros(model.config.ring_latent_dim)
    for z in slots:
        h1 = _act(z @ pr["enc_w1"] + pr["enc_b1"], act)
        latent = latent + (h1 @ pr["enc_w2"] + pr["enc_b2"])[0]
    return latent


def forward_coeffs(model: SurrogateModel, design: MembraneDesign,
                   height_mm: float) -> np.ndarray:
    """Polynomial coefficients c[0..d] of F_norm in normalized pressure."""
    x = design_row(design, height_mm, 0.0)[None, :]
    _, cache = _forward(model, x)
    return cache[7][0].copy()


def predict_force(model: SurrogateModel, design: MembraneDesign,
                  height_mm: float, p_kpa: float) -> float:
    f, _ = _forward(model, design_row(design, height_mm, p_kpa)[None, :])
    return float(f[0])


def predict_batch(model: SurrogateModel, x: np.ndarray) -> np.ndarray:
    """Force predictions (N) for raw feature rows."""
    f, _ = _forward(model, np.atleast_2d(np.asarray(x, dtype=float)))
    return f


def predict_with_input_grad(model: SurrogateModel, x: np.ndarray
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Forces and dF/d(raw feature) rows, for gradient-based optimizers."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    f, cache = _forward(model, x)
    _, dx = _backward(model, cache, np.ones_like(f))
    return f, dx


def loss_and_grad(model: SurrogateModel, x: np.ndarray, f_true: np.ndarray
                  ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared force error (N^2) and its parameter gradient."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    f_true = np.asarray(f_true, dtype=float)
    if x.shape[0] == 0:
        raise EmptyBatch("cannot evaluate the loss of an empty batch")
    f, cache = _forward(model, x)
    resid = f - f_true
    loss = float(np.mean(resid ** 2))
    grads, _ = _backward(model, cache, 2.0 * resid / x.shape[0])
    return loss, grads


def evaluate_rmse(model: SurrogateModel, ds: Dataset) -> float:
    if len(ds) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    flat = ds.flatten()
    f = predict_batch(model, flat.x)
    return float(np.sqrt(np.mean((f - flat.f) ** 2)))


@dataclass
class TrainResult:
    model: SurrogateModel
    train_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    best_epoch: int = 0


def train(
    cfg: ModelConfig,
    train_ds: Dataset,
    val_ds: Dataset,
    stats: NormStats | None = None,
    lr: float = 1e-3,
    batch_size: int = 256,
    max_epochs: int = 2000,
    patience: int = 100,
    init_seed: int | None = None,
    bootstrap_seed: int | None = None,
    target_fn=None,
) -> TrainResult:
    """Seeded mini-batch gradient descent with adaptive moments.

    Returns the parameters with the best validation RMSE.  `target_fn`
    optionally remaps targets given predictions of another model (used by
    the ensemble to train members on residuals); it receives the raw rows
    and true forces and returns the effective training targets.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise EmptyDataset("training and validation datasets must be non-empty")
    stats = stats or compute_norm_stats(train_ds)
    flat = train_ds.flatten()
    x, f = flat.x, flat.f
    if bootstrap_seed is not None:
        rs = np.random.default_rng(bootstrap_seed)
        pick = rs.integers(0, x.shape[0], x.shape[0])
        x, f = x[pick], f[pick]
    if target_fn is not None:
        f = target_fn(x, f)
    val_flat = val_ds.flatten()
    val_f = val_flat.f if target_fn is None else target_fn(val_flat.x, val_flat.f)

    model = SurrogateModel(cfg, stats, init_params(cfg, init_seed))
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(v) for k, v in model.params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    rng = np.random.default_rng(cfg.seed + 1)

    def val_rmse():
        pred = predict_batch(model, val_flat.x)
        return float(np.sqrt(np.mean((pred - val_f) ** 2)))

    best = val_rmse()
    best_params = {k: p.copy() for k, p in model.params.items()}
    result = TrainResult(model=model, val_curve=[best])
    stall, step = 0, 0
    n = x.shape[0]
    for epoch in range(max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            loss, grads = loss_and_grad(model, x[idx], f[idx])
            if not np.isfinite(loss):
                raise Divergence(f"loss became non-finite at epoch {epoch}")
            epoch_loss += loss * len(idx)
            step += 1
            for k, g in grads.items():
                m[k] = beta1 * m[k] + (1 - beta1) * g
                v[k] = beta2 * v[k] + (1 - beta2) * g * g
                mh = m[k] / (1 - beta1 ** step)
                vh = v[k] / (1 - beta2 ** step)
                model.params[k] -= lr * mh / (np.sqrt(vh) + eps)
        result.train_curve.append(epoch_loss / n)
        rmse = val_rmse()
        result.val_curve.append(rmse)
        if rmse < best:
            best = rmse
            best_params = {k: p.copy() for k, p in model.params.items()}
            result.best_epoch = epoch + 1
            stall = 0
        else:
            stall += 1
            if stall >= patience:
                break
    model.params = best_params
    return result


# --- curve-fit baseline ----------------------------------------------------

def _baseline_columns(x: np.ndarray, n_design_params: int) -> np.ndarray:
    """Total-degree-3 basis in (p, h) plus linear design interactions."""
    p = x[:, _COL_P]
    h = x[:, _COL_H]
    cols = [np.ones_like(p), p, h, p * p, p * h, h * h,
            p ** 3, p * p * h, p * h * h, h ** 3]
    if n_design_params == 2:
        design = x[:, [_COL_T, _COL_R0]]
    else:
        design = x[:, [_COL_T, _COL_R0, 2, 3, 5, 6]]
    for j in range(design.shape[1]):
        d = design[:, j]
        cols += [d, d * p, d * h]
    return np.stack(cols, axis=1)


def curvefit_baseline(train_ds: Dataset, test_ds: Dataset) -> float:
    """Least-squares polynomial baseline; returns test RMSE in N.

    Fits forces with a fixed degree-3 polynomial in (pressure, height)
    plus terms linear in each design parameter (optionally times p or h).
    Requires the dataset to be all-ringless or all-ringed.
    """
    ring_counts = {len(r.design.rings)
                   for r in train_ds.records + test_ds.records}
    if 0 in ring_counts and ring_counts != {0}:
        raise InvariantViolation(
            "baseline requires an all-ringless or all-ringed dataset")
    n_design = 2 if ring_counts == {0} else 6
    tr, te = train_ds.flatten(), test_ds.flatten()
    a = _baseline_columns(tr.x, n_design)
    if a.shape[0] < a.shape[1]:
        raise RankDeficient(
            f"{a.shape[0]} rows cannot determine {a.shape[1]} coefficients")
    # minimum-norm solution tolerates collinear columns (e.g. a constant
    # design parameter duplicating the intercept)
    coef, _, _, _ = np.linalg.lstsq(a, tr.f, rcond=None)
    pred = _baseline_columns(te.x, n_design) @ coef
    return float(np.sqrt(np.mean((pred - te.f) ** 2)))


# --- checkpoint format -----------------------------------------------------

def save_model(model: SurrogateModel, path: str | os.PathLike) -> None:
    """Single JSON document: config, normalization stats, and parameters
    (little-endian float64, base64)."""
    vec = flatten_params(model.params, model.config)
    doc = {
        "format": "membrane-forge-surrogate-v1",
        "config": {
            "mlp_depth": model.config.mlp_depth,
            "mlp_width": model.config.mlp_width,
            "ring_latent_dim": model.config.ring_latent_dim,
            "poly_degree": model.config.poly_degree,
            "activation": model.config.activation,
            "seed": model.config.seed,
        },
        "norm_stats": {
            "mean": list(model.stats.mean),
            "std": list(model.stats.std),
            "f_mean": model.stats.f_mean,
            "f_std": model.stats.f_std,
        },
        "params_b64": base64.b64encode(
            vec.astype("<f8").tobytes()).decode("ascii"),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_model(path: str | os.PathLike) -> SurrogateModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "membrane-forge-surrogate-v1":
        raise ConfigError(f"unrecognized checkpoint format in {path}")
    cfg = ModelConfig(**doc["config"])
    ns = doc["norm_stats"]
    stats = NormStats(mean=tuple(ns["mean"]), std=tuple(ns["std"]),
                      f_mean=ns["f_mean"], f_std=ns["f_std"])
    vec = np.frombuffer(base64.b64decode(doc["params_b64"]), dtype="<f8")
    return SurrogateModel(cfg, stats, unflatten_params(vec.astype(float), cfg))
