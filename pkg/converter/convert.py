#!/usr/bin/env python3
"""Convert a pickled membrane test dictionary to the JSONL dataset format.

Input layout
------------
The pickle holds one dictionary keyed by membrane design parameters.  Each
key is a tuple of 2 or 6 numbers::

    (thickness_mm, contact_radius_mm)                       # ringless
    (thickness_mm, contact_radius_mm,
     ring1_center_mm, ring1_half_width_mm,
     ring2_center_mm, ring2_half_width_mm)                  # NaN = no ring

Each value is a list of trials (or a dict of trial-id -> trial).  A trial
is a dictionary with per-sample arrays for pressure and force, a scalar
contact-plate height, and any number of extra scalar fields which are
preserved verbatim in the output record's ``meta``.

Recognized field aliases (first match wins):

    pressure:  "pressure", "pressure_kpa" (kPa), "pressure_pa" (Pa)
    force:     "force", "force_n" (N)
    height:    "height", "height_mm", "plate_height_mm" (mm), "height_m" (m)

Only inflation-phase rows are exported: within each trial the leading run
of non-decreasing pressure (up to ``--tolerance`` kPa of sensor jitter) is
kept and the deflation tail is dropped, unless ``--keep-deflation`` is
given.

Output
------
One JSON object per line, sorted by design key, then trial id, then
height; samples within a record are sorted by pressure.  A conversion
report is printed to stdout as JSON.

Usage::

    convert.py --in data.pkl --out data.jsonl [--keep-deflation]
"""

from __future__ import annotations

import argparse
import json
import math
import os
import pickle
import sys
import tempfile


class UnrecognizedLayout(Exception):
    """The pickle does not follow the documented dictionary layout."""


PRESSURE_ALIASES = (("pressure", 1.0), ("pressure_kpa", 1.0),
                    ("pressure_pa", 1e-3))
FORCE_ALIASES = (("force", 1.0), ("force_n", 1.0))
HEIGHT_ALIASES = (("height", 1.0), ("height_mm", 1.0),
                  ("plate_height_mm", 1.0), ("height_m", 1000.0))

# conversions that are not the identity, reported when used
_CONVERSION_NOTES = {"pressure_pa": "pressure: Pa -> kPa",
                     "height_m": "height: m -> mm"}


def _top_level_dump(obj) -> str:
    if isinstance(obj, dict):
        keys = list(obj)[:20]
        return f"dict with {len(obj)} keys, first {len(keys)}: {keys!r}"
    return f"{type(obj).__name__}: {obj!r:.200}"


def _as_float_list(value, name: str):
    try:
        out = [float(v) for v in value]
    except (TypeError, ValueError) as exc:
        raise UnrecognizedLayout(f"field {name!r} is not a numeric "
                                 f"sequence: {value!r:.80}") from exc
    return out


def _pick_field(trial: dict, aliases, kind: str):
    """Return (values, scale, alias) for the first alias present."""
    for name, scale in aliases:
        if name in trial:
            return trial[name], scale, name
    raise UnrecognizedLayout(
        f"trial is missing a {kind} field (looked for "
        f"{[a for a, _ in aliases]}); trial keys: {sorted(trial)}")


def _design_from_key(key) -> dict:
    if not isinstance(key, (tuple, list)) or len(key) not in (2, 6):
        raise UnrecognizedLayout(
            f"design key must be a tuple of 2 or 6 numbers, got {key!r}")
    try:
        vals = [float(v) for v in key]
    except (TypeError, ValueError) as exc:
        raise UnrecognizedLayout(f"non-numeric design key {key!r}") from exc
    rings = []
    for center, half_width in zip(vals[2::2], vals[3::2]):
        if math.isnan(center) and math.isnan(half_width):
            continue
        rings.append({"center_radius_mm": center,
                      "half_width_mm": half_width})
    rings.sort(key=lambda r: r["center_radius_mm"])
    return {"thickness_mm": vals[0], "contact_radius_mm": vals[1],
            "rings": rings}


def _sort_key(key) -> tuple:
    # NaN-safe ordering: absent rings sort before any real ring
    return tuple((1, 0.0) if math.isnan(v) else (0, v)
                 for v in (float(x) for x in key))


def _iter_trials(value, key):
    if isinstance(value, dict):
        for trial_id in sorted(value, key=str):
            yield str(trial_id), value[trial_id]
    elif isinstance(value, (list, tuple)):
        for i, trial in enumerate(value):
            yield str(i), trial
    else:
        raise UnrecognizedLayout(
            f"value for key {key!r} must be a list or dict of trials, "
            f"got {type(value).__name__}")


def _inflation_prefix(pressures, tolerance: float) -> int:
    """Length of the leading non-decreasing pressure run."""
    n = 1
    while n < len(pressures) and pressures[n] >= pressures[n - 1] - tolerance:
        n += 1
    return n


def convert(pkl_path, out_path, keep_deflation: bool = False,
            tolerance: float = 0.0) -> dict:
    """Convert one pickle file; returns the conversion report."""
    with open(pkl_path, "rb") as fh:
        try:
            data = pickle.load(fh)
        except (pickle.UnpicklingError, EOFError) as exc:
            raise UnrecognizedLayout(f"not a pickle file: {exc}") from exc
    if not isinstance(data, dict):
        raise UnrecognizedLayout(
            f"expected a top-level dict, got {_top_level_dump(data)}")

    records = []
    dropped_rows = 0
    conversions = set()
    designs = set()
    for key in sorted(data, key=_sort_key):
        design = _design_from_key(key)
        designs.add(json.dumps(design, sort_keys=True))
        for trial_id, trial in _iter_trials(data[key], key):
            if not isinstance(trial, dict):
                raise UnrecognizedLayout(
                    f"trial {trial_id} under key {key!r} is not a dict")
            p_raw, p_scale, p_name = _pick_field(trial, PRESSURE_ALIASES,
                                                 "pressure")
            f_raw, f_scale, f_name = _pick_field(trial, FORCE_ALIASES,
                                                 "force")
            h_raw, h_scale, h_name = _pick_field(trial, HEIGHT_ALIASES,
                                                 "height")
            pressures = [v * p_scale for v in _as_float_list(p_raw, p_name)]
            forces = [v * f_scale for v in _as_float_list(f_raw, f_name)]
            if len(pressures) != len(forces):
                raise UnrecognizedLayout(
                    f"trial {trial_id} under key {key!r}: pressure and "
                    f"force lengths differ ({len(pressures)} vs "
                    f"{len(forces)})")
            for name in (p_name, f_name, h_name):
                if name in _CONVERSION_NOTES:
                    conversions.add(_CONVERSION_NOTES[name])
            try:
                height = float(h_raw) * h_scale
            except (TypeError, ValueError) as exc:
                raise UnrecognizedLayout(
                    f"trial {trial_id} under key {key!r}: height field "
                    f"{h_name!r} is not a scalar") from exc
            if not pressures:
                continue
            if not keep_deflation:
                n_keep = _inflation_prefix(pressures, tolerance)
                dropped_rows += len(pressures) - n_keep
                pressures, forces = pressures[:n_keep], forces[:n_keep]
            samples = sorted(zip(pressures, forces))
            meta = {"trial_id": trial_id}
            skip = {p_name, f_name, h_name}
            for extra, value in trial.items():
                if extra in skip:
                    continue
                if isinstance(value, (str, int, float, bool)) or value is None:
                    meta[extra] = value
            records.append({"design": design, "height_mm": height,
                            "samples": [[p, f] for p, f in samples],
                            "meta": meta})

    tmp_fd, tmp_path = tempfile.mkstemp(
        dir=os.path.dirname(os.path.abspath(out_path)), suffix=".tmp")
    try:
        with os.fdopen(tmp_fd, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        os.replace(tmp_path, out_path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise

    return {
        "records": len(records),
        "designs": len(designs),
        "points": sum(len(r["samples"]) for r in records),
        "dropped_deflation_rows": dropped_rows,
        "unit_conversions": sorted(conversions),
        "out": str(out_path),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--in", dest="pkl_path", required=True,
                        help="input pickle file")
    parser.add_argument("--out", dest="out_path", required=True,
                        help="output JSONL file")
    parser.add_argument("--keep-deflation", action="store_true",
                        help="export deflation-phase rows as well")
    parser.add_argument("--tolerance", type=float, default=0.0,
                        help="pressure jitter (kPa) still counted as "
                             "non-decreasing during inflation detection")
    args = parser.parse_args(argv)
    try:
        report = convert(args.pkl_path, args.out_path,
                         keep_deflation=args.keep_deflation,
                         tolerance=args.tolerance)
    except (UnrecognizedLayout, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(report, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
