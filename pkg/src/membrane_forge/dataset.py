"""Canonical JSONL dataset format, synthetic generation, and k-fold splits.

On-disk schema (one record per line):
  {"design": {"thickness_mm": .., "contact_radius_mm": ..,
              "rings": [{"center_radius_mm": .., "half_width_mm": ..}, ...]},
   "height_mm": .., "samples": [[p_kpa, f_n], ...], "meta": {...}}

Absent rings are an empty list.  Pressures are kPa on disk and in records;
the simulator layer works in MPa.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .designs import MembraneDesign, Ring
from .errors import (
    EmptyDataset,
    InvariantViolation,
    ParseError,
    SchemaError,
    TooFewDesigns,
)
from .material import silicone_params
from .sim import DEFAULT_SOLVER, SolverConfig, sweep

KPA_TO_MPA = 1e-3
MAX_HEIGHT_MM = 80.0

# Flattened feature column order used by the learned models.
FEATURE_NAMES = (
    "thickness", "contact_radius",
    "ring1_center", "ring1_half", "ring1_present",
    "ring2_center", "ring2_half", "ring2_present",
    "height", "pressure",
)


@dataclass(frozen=True)
class TrialRecord:
    design: MembraneDesign
    height_mm: float
    samples: tuple[tuple[float, float], ...]  # (pressure kPa, force N)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.samples:
            raise InvariantViolation("sample list must be non-empty")
        if not 0.0 <= self.height_mm <= MAX_HEIGHT_MM:
            raise InvariantViolation(
                f"height {self.height_mm} outside [0, {MAX_HEIGHT_MM}] mm"
            )
        for p, _ in self.samples:
            if p < 0:
                raise InvariantViolation(f"negative pressure {p} kPa")

    def to_json_dict(self) -> dict:
        return {
            "design": {
                "thickness_mm": self.design.thickness,
                "contact_radius_mm": self.design.contact_radius,
                "rings": [
                    {"center_radius_mm": r.center_radius,
                     "half_width_mm": r.half_width}
                    for r in self.design.rings
                ],
            },
            "height_mm": self.height_mm,
            "samples": [[p, f] for p, f in self.samples],
            "meta": self.meta,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "TrialRecord":
        if not isinstance(obj, dict):
            raise SchemaError("record must be a JSON object")
        missing = {"design", "height_mm", "samples"} - set(obj)
        if missing:
            raise SchemaError(f"missing keys: {sorted(missing)}")
        d = obj["design"]
        try:
            rings = tuple(
                Ring(r["center_radius_mm"], r["half_width_mm"])
                for r in d.get("rings", [])
            )
            design = MembraneDesign(
                contact_radius=float(d["contact_radius_mm"]),
                thickness=float(d["thickness_mm"]),
                rings=rings,
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed design: {exc}") from exc
        except ValueError as exc:
            raise InvariantViolation(str(exc)) from exc
        samples = obj["samples"]
        if not isinstance(samples, list) or any(len(s) != 2 for s in samples):
            raise SchemaError("samples must be a list of [p_kpa, f_n] pairs")
        return cls(
            design=design,
            height_mm=float(obj["height_mm"]),
            samples=tuple((float(p), float(f)) for p, f in samples),
            meta=dict(obj.get("meta", {})),
        )


@dataclass
class Dataset:
    records: list[TrialRecord]

    def __post_init__(self):
        self.design_index: dict[str, list[int]] = {}
        for i, rec in enumerate(self.records):
            self.design_index.setdefault(rec.design.key(), []).append(i)

    def __len__(self):
        return len(self.records)

    def design_keys(self) -> list[str]:
        return list(self.design_index)

    def designs(self) -> list[MembraneDesign]:
        return [self.records[idx[0]].design for idx in self.design_index.values()]

    def n_rows(self) -> int:
        return sum(len(rec.samples) for rec in self.records)

    def subset_by_designs(self, keys: Iterable[str]) -> "Dataset":
        keys = set(keys)
        return Dataset([r for r in self.records if r.design.key() in keys])

    def merged_with(self, other: "Dataset") -> "Dataset":
        return Dataset(self.records + other.records)

    def flatten(self) -> "FlatData":
        """Expand records into per-sample rows for model training."""
        rows, forces, keys = [], [], []
        for rec in self.records:
            t = rec.design.thickness
            r0 = rec.design.contact_radius
            ring_cols = []
            for i in range(2):
                if i < len(rec.design.rings):
                    rg = rec.design.rings[i]
                    ring_cols += [rg.center_radius, rg.half_width, 1.0]
                else:
                    ring_cols += [0.0, 0.0, 0.0]
            key = rec.design.key()
            for p, f in rec.samples:
                rows.append([t, r0, *ring_cols, rec.height_mm, p])
                forces.append(f)
                keys.append(key)
        return FlatData(
            x=np.array(rows, dtype=float).reshape(-1, len(FEATURE_NAMES)),
            f=np.array(forces, dtype=float),
            membrane=np.array(keys, dtype=object),
        )


@dataclass
class FlatData:
    x: np.ndarray  # (n, 10) columns per FEATURE_NAMES
    f: np.ndarray  # (n,)
    membrane: np.ndarray  # (n,) design keys


def save(ds: Dataset, path: str | os.PathLike) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        for rec in ds.records:
            fh.write(json.dumps(rec.to_json_dict()) + "\n")
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> Dataset:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            try:
                records.append(TrialRecord.from_json_dict(obj))
            except (SchemaError, InvariantViolation) as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from exc
    return Dataset(records)


def export_csv(ds: Dataset, path: str | os.PathLike) -> None:
    """Flat CSV mirroring the sweep format."""
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("design_id,h_mm,p_kpa,F_n,success,solver_iters\n")
        for rec in ds.records:
            key = rec.design.key()
            for p, f in rec.samples:
                fh.write(f"{key},{rec.height_mm},{p},{f},1,0\n")
    os.replace(tmp, path)


def generate_synthetic(
    designs: Sequence[MembraneDesign],
    heights_mm: Sequence[float],
    pressures_kpa: Sequence[float],
    noise_sd: float = 0.0,
    seed: int = 0,
    solver: SolverConfig = DEFAULT_SOLVER,
    material_for: Callable[[MembraneDesign], object] | None = None,
) -> Dataset:
    """Simulator-backed stand-in for the physical test rig.

    One record per (design, height); solver failures drop individual
    pressure points.  Deterministic for a fixed seed.
    """
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    mat_of = material_for or (lambda d: silicone_params(d.thickness))
    rng = np.random.default_rng(seed)
    records = []
    for di, design in enumerate(designs):
        mat = mat_of(design)
        points = sweep(design, mat, list(heights_mm),
                       [p * KPA_TO_MPA for p in pressures_kpa], solver)
        by_height: dict[float, list[tuple[float, float]]] = {}
        for pt in points:
            if not pt.success:
                continue
            p_kpa = pt.pressure_mpa / KPA_TO_MPA
            f = pt.force_n
            if noise_sd > 0:
                f += rng.normal(0.0, noise_sd)
            by_height.setdefault(pt.height_mm, []).append((p_kpa, f))
        for hi, h in enumerate(heights_mm):
            samples = by_height.get(h)
            if not samples:
                continue
            records.append(TrialRecord(
                design=design,
                height_mm=h,
                samples=tuple(samples),
                meta={"trial": f"syn-{di:03d}-{hi:02d}", "source": "synthetic"},
            ))
    return Dataset(records)


def kfold_by_membrane(ds: Dataset, k: int, seed: int = 0
                      ) -> list[tuple[Dataset, Dataset]]:
    """Membrane-wise folds: designs (not rows) partition into k test groups."""
    if k < 2:
        raise TooFewDesigns(f"k must be >= 2, got {k}")
    keys = sorted(ds.design_index)
    if len(keys) < k:
        raise TooFewDesigns(f"{len(keys)} designs < k = {k}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(keys))
    folds: list[list[str]] = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(keys[idx])
    splits = []
    for fold in folds:
        test_keys = set(fold)
        train_keys = [key for key in keys if key not in test_keys]
        splits.append((ds.subset_by_designs(train_keys),
                       ds.subset_by_designs(test_keys)))
    return splits


@dataclass(frozen=True)
class NormStats:
    """Standardization statistics (means, deviations) for model inputs and
    the force target.  Constant inputs get deviation 1; ring statistics are
    pooled over present rings only; presence flags are left unscaled."""

    mean: tuple[float, ...]  # per FEATURE_NAMES column
    std: tuple[float, ...]
    f_mean: float
    f_std: float

    def normalize_x(self, x: np.ndarray) -> np.ndarray:
        return (x - np.asarray(self.mean)) / np.asarray(self.std)

    def normalize_f(self, f: np.ndarray) -> np.ndarray:
        return (f - self.f_mean) / self.f_std

    def denormalize_f(self, f_norm):
        return f_norm * self.f_std + self.f_mean


def _mean_std(values: np.ndarray) -> tuple[float, float]:
    if values.size == 0:
        return 0.0, 1.0
    m = float(np.mean(values))
    s = float(np.std(values))
    if s < 1e-12:
        s = 1.0
    return m, s


def compute_norm_stats(ds: Dataset) -> NormStats:
    if len(ds) == 0:
        raise EmptyDataset("cannot compute statistics of an empty dataset")
    flat = ds.flatten()
    x, f = flat.x, flat.f
    means, stds = [], []
    # pooled ring-geometry statistics over present slots only
    present1 = x[:, 4] > 0.5
    present2 = x[:, 7] > 0.5
    centers = np.concatenate([x[present1, 2], x[present2, 5]])
    halves = np.concatenate([x[present1, 3], x[present2, 6]])
    c_mean, c_std = _mean_std(centers)
    w_mean, w_std = _mean_std(halves)
    for i, name in enumerate(FEATURE_NAMES):
        if name in ("ring1_present", "ring2_present"):
            means.append(0.0)
            stds.append(1.0)
        elif name in ("ring1_center", "ring2_center"):
            means.append(c_mean)
            stds.append(c_std)
        elif name in ("ring1_half", "ring2_half"):
            means.append(w_mean)
            stds.append(w_std)
        else:
            m, s = _mean_std(x[:, i])
            means.append(m)
            stds.append(s)
    f_mean, f_std = _mean_std(f)
    return NormStats(mean=tuple(means), std=tuple(stds),
                     f_mean=f_mean, f_std=f_std)
