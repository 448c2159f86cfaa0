"""Command-line entry point.

Subcommands: simulate, sweep, gen-data, train, eval, al {propose, ingest,
step}, design {waypoints, optimize}, pipeline, plot.

Exit codes: 0 ok; 2 config error; 3 solver failure (shooting);
4 data error; 5 training error; 6 optimization error;
7 no equilibrium at the boundary condition.

Every command is a pure function of (config, input files, seed); output
files are written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataset as dsm
from . import design_opt as dopt
from . import ensemble as ens_mod
from . import sim
from . import surrogate as sg
from .config import config_defaults_doc, load_run_config
from .designs import MembraneDesign, Ring
from .errors import (
    AllStartsFailed,
    ConfigError,
    Divergence,
    EmptyBatch,
    EmptyDataset,
    ExtensionLimitExceeded,
    InvariantViolation,
    MembraneForgeError,
    ModelEvaluationFailed,
    NoEquilibrium,
    NotReachable,
    ParseError,
    RankDeficient,
    SchemaError,
    ShootingFailed,
    SingularRhs,
    TargetUnreachable,
    TooFewDesigns,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_DATA = 4
EXIT_TRAINING = 5
EXIT_OPTIMIZATION = 6
EXIT_NO_EQUILIBRIUM = 7

_EXIT_BY_ERROR = [
    (NoEquilibrium, EXIT_NO_EQUILIBRIUM),
    ((ShootingFailed, SingularRhs, ExtensionLimitExceeded, NotReachable,
      ModelEvaluationFailed), EXIT_SOLVER),
    ((ParseError, SchemaError, InvariantViolation, EmptyDataset,
      TooFewDesigns), EXIT_DATA),
    ((Divergence, RankDeficient, EmptyBatch), EXIT_TRAINING),
    ((AllStartsFailed, TargetUnreachable), EXIT_OPTIMIZATION),
    (ConfigError, EXIT_CONFIG),
]


def _exit_code_for(exc: MembraneForgeError) -> int:
    for types, code in _EXIT_BY_ERROR:
        if isinstance(exc, types):
            return code
    return 1


def _write_json(path, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _design_from_json(obj: dict) -> MembraneDesign:
    try:
        rings = tuple(Ring(r["center_radius_mm"], r["half_width_mm"])
                      for r in obj.get("rings", []))
        return MembraneDesign(contact_radius=float(obj["contact_radius_mm"]),
                              thickness=float(obj["thickness_mm"]),
                              rings=rings)
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed design document: {exc}") from exc
    except ValueError as exc:
        raise InvariantViolation(str(exc)) from exc


def _design_to_json(d: MembraneDesign) -> dict:
    return {
        "thickness_mm": d.thickness,
        "contact_radius_mm": d.contact_radius,
        "rings": [{"center_radius_mm": r.center_radius,
                   "half_width_mm": r.half_width} for r in d.rings],
    }


def _load_design(path) -> MembraneDesign:
    try:
        with open(path) as fh:
            return _design_from_json(json.load(fh))
    except FileNotFoundError as exc:
        raise ConfigError(f"design file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}"
                          ) from exc


# --- commands --------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_run_config(args.config)
    design = _load_design(args.design)
    mat = cfg.material.params(design.thickness)
    solver = cfg.solver.solver_config(cfg.material)
    p_mpa = args.p_kpa * 1e-3
    if args.height_mm is not None:
        force = sim.force_at_height(design, mat, p_mpa, args.height_mm, solver)
        shape = None
        summary = {"pressure_kpa": args.p_kpa, "height_mm": args.height_mm,
                   "force_n": force}
    else:
        shape = sim.solve_shape(design, mat, p_mpa, args.force_n, solver)
        summary = {"pressure_kpa": args.p_kpa, "force_n": args.force_n,
                   "contact_height_mm": shape.contact_height}
    if args.out_prefix:
        _write_json(f"{args.out_prefix}.json", summary)
        if shape is not None:
            lines = ["r_mm,R_mm,Z_mm,lambda1,lambda2,beta_rad"]
            for i in range(len(shape.r)):
                lines.append(
                    f"{shape.r[i]},{shape.R[i]},{shape.Z[i]},"
                    f"{shape.l1[i]},{shape.l2[i]},{shape.beta[i]}")
            _write_text(f"{args.out_prefix}.csv", "\n".join(lines) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config)
    design = _load_design(args.design)
    mat = cfg.material.params(design.thickness)
    solver = cfg.solver.solver_config(cfg.material)
    heights = _floats(args.heights_mm)
    pressures = [p * 1e-3 for p in _floats(args.pressures_kpa)]
    points = sim.sweep(design, mat, heights, pressures, solver)
    lines = ["h_mm,p_kpa,F_n,success,solver_iters,error"]
    for pt in points:
        lines.append(f"{pt.height_mm},{pt.pressure_mpa * 1e3},{pt.force_n},"
                     f"{int(pt.success)},{pt.solver_iters},"
                     f"{pt.error or ''}")
    _write_text(args.out, "\n".join(lines) + "\n")
    n_ok = sum(pt.success for pt in points)
    print(json.dumps({"points": len(points), "succeeded": n_ok,
                      "out": args.out}))
    return EXIT_OK


def _load_designs_file(path) -> list[MembraneDesign]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"designs file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(doc, list):
        raise SchemaError(f"{path}: expected a JSON list of designs")
    return [_design_from_json(d) for d in doc]


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    designs = _load_designs_file(args.designs)
    solver = cfg.solver.solver_config(cfg.material)
    ds = dsm.generate_synthetic(
        designs, _floats(args.heights_mm), _floats(args.pressures_kpa),
        noise_sd=args.noise_sd, seed=cfg.effective_seed(), solver=solver,
        material_for=lambda d: cfg.material.params(d.thickness))
    dsm.save(ds, args.out)
    print(json.dumps({"records": len(ds), "rows": ds.n_rows(),
                      "designs": len(ds.design_index), "out": args.out}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    train_ds = dsm.load(args.data)
    val_ds = dsm.load(args.val) if args.val else train_ds
    model_cfg = cfg.model.model_config(cfg.effective_seed())
    res = sg.train(model_cfg, train_ds, val_ds,
                   lr=cfg.training.lr, batch_size=cfg.training.batch_size,
                   max_epochs=cfg.training.max_epochs,
                   patience=cfg.training.patience)
    sg.save_model(res.model, args.out)
    print(json.dumps({"val_rmse_n": min(res.val_curve),
                      "best_epoch": res.best_epoch,
                      "epochs_run": len(res.train_curve), "out": args.out}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = sg.load_model(args.model)
    ds = dsm.load(args.data)
    rmse = sg.evaluate_rmse(model, ds)
    report = {"rmse_n": rmse, "rows": ds.n_rows(),
              "designs": len(ds.design_index)}
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(report))
    return EXIT_OK


# --- active-learning session ----------------------------------------------

def _session_paths(session):
    return (os.path.join(session, "state.json"),
            os.path.join(session, "proposals.jsonl"),
            os.path.join(session, "acquired.jsonl"))


def _save_ensemble(ens, session, iteration) -> dict:
    paths = []
    for i, m in enumerate(ens.members):
        prior_path = os.path.join(session, f"member{i}_prior.json")
        train_path = os.path.join(session, f"member{i}_trainable.json")
        sg.save_model(m.prior, prior_path)
        sg.save_model(m.trainable, train_path)
        paths.append({"prior": prior_path, "trainable": train_path})
    return {"iteration": iteration, "prior_scale": ens.prior_scale,
            "members": paths}


def _load_ensemble(state) -> ens_mod.RpnEnsemble:
    members = []
    for entry in state["members"]:
        prior = sg.load_model(entry["prior"])
        trainable = sg.load_model(entry["trainable"])
        members.append(ens_mod.RpnMember(prior, trainable,
                                         state["prior_scale"]))
    return ens_mod.RpnEnsemble(members, members[0].trainable.config,
                               members[0].trainable.stats,
                               state["prior_scale"])


def cmd_al(args) -> int:
    cfg = load_run_config(args.config)
    seed = cfg.effective_seed()
    state_path, proposals_path, acquired_path = _session_paths(args.session)
    os.makedirs(args.session, exist_ok=True)
    e_cfg = cfg.ensemble
    grid = e_cfg.grid()
    box = cfg.box.design_box()

    if args.al_cmd == "propose":
        ds = dsm.load(args.data)
        if os.path.exists(state_path):
            with open(state_path) as fh:
                state = json.load(fh)
            ens = _load_ensemble(state)
        else:
            model_cfg = cfg.model.model_config(seed)
            ens = ens_mod.build_ensemble(
                model_cfg, ds, ds, n_members=e_cfg.n_members,
                prior_scale=e_cfg.prior_scale, seed=seed,
                lr=cfg.training.lr, batch_size=cfg.training.batch_size,
                max_epochs=cfg.training.max_epochs,
                patience=cfg.training.patience)
            state = _save_ensemble(ens, args.session, 0)
            _write_json(state_path, state)
        acq = ens_mod.maximize_acquisition(ens, box, grid, q=e_cfg.q,
                                           n_starts=e_cfg.n_starts, seed=seed)
        lines = [json.dumps(_design_to_json(d)) for d in acq.designs]
        _write_text(proposals_path, "\n".join(lines) + "\n")
        print(json.dumps({"alpha": acq.alpha,
                          "degenerate": acq.degenerate,
                          "proposals": proposals_path}))
        return EXIT_OK

    if args.al_cmd == "ingest":
        new_ds = dsm.load(args.records)
        base = dsm.load(args.data)
        merged = base.merged_with(new_ds)
        dsm.save(merged, args.data)
        with open(acquired_path, "a") as fh:
            for rec in new_ds.records:
                fh.write(json.dumps(rec.to_json_dict()) + "\n")
        print(json.dumps({"ingested": len(new_ds), "total": len(merged)}))
        return EXIT_OK

    # al step --oracle sim: one full iteration against the simulator
    if args.oracle != "sim":
        raise ConfigError(f"unknown oracle {args.oracle!r}; only 'sim' is "
                          "built in")
    ds = dsm.load(args.data)
    solver = cfg.solver.solver_config(cfg.material)
    model_cfg = cfg.model.model_config(seed)
    train_kw = dict(lr=cfg.training.lr, batch_size=cfg.training.batch_size,
                    max_epochs=cfg.training.max_epochs,
                    patience=cfg.training.patience)
    if os.path.exists(state_path):
        with open(state_path) as fh:
            state = json.load(fh)
        ens = _load_ensemble(state)
        iteration = state["iteration"]
    else:
        ens = ens_mod.build_ensemble(
            model_cfg, ds, ds, n_members=e_cfg.n_members,
            prior_scale=e_cfg.prior_scale, seed=seed, **train_kw)
        iteration = 0

    def oracle(design):
        syn = dsm.generate_synthetic(
            [design], list(grid.heights_mm), list(grid.pressures_kpa),
            noise_sd=0.0, seed=seed, solver=solver,
            material_for=lambda d: cfg.material.params(d.thickness))
        return syn.records

    res = ens_mod.al_iteration(ens, box, grid, oracle, ds, ds, q=e_cfg.q,
                               n_starts=e_cfg.n_starts,
                               seed=seed + iteration, **train_kw)
    dsm.save(res.dataset, args.data)
    with open(acquired_path, "a") as fh:
        for rec in res.dataset.records[len(ds):]:
            fh.write(json.dumps(rec.to_json_dict()) + "\n")
    state = _save_ensemble(res.ensemble, args.session, iteration + 1)
    _write_json(state_path, state)
    print(json.dumps({"iteration": iteration + 1, "alpha": res.alpha,
                      "new_records": res.n_new_records,
                      "oracle_failures": res.oracle_failures}))
    return EXIT_OK


# --- design commands -------------------------------------------------------

def cmd_design(args) -> int:
    cfg = load_run_config(args.config)
    d_cfg = cfg.design
    targets = dopt.LiftTargets(
        forces_n=tuple(m * dopt.G_MPS2 for m in d_cfg.masses_kg),
        pressures_kpa=tuple(d_cfg.target_pressures_kpa),
        k_force=d_cfg.k_force, k_pressure=d_cfg.k_pressure,
        k_height=d_cfg.k_height, gamma=d_cfg.gamma)

    if args.design_cmd == "waypoints":
        model = dopt.SurrogateForce(sg.load_model(args.model))
        design = _load_design(args.design)
        masses = _floats(args.masses)
        pressures = list(np.arange(0.5, 10.0 + 1e-9, 0.05))
        report = {"design": _design_to_json(design), "trajectories": []}
        for mass in masses:
            traj = dopt.lift_trajectory(model, design, mass, pressures)
            report["trajectories"].append({
                "mass_kg": mass,
                "force_n": mass * dopt.G_MPS2,
                "samples": [[p, h, f] for p, h, f in traj.samples],
            })
        if args.out:
            _write_json(args.out, report)
        print(json.dumps({"trajectories": len(report["trajectories"]),
                          "out": args.out}))
        return EXIT_OK

    # design optimize
    model = dopt.SurrogateForce(sg.load_model(args.model))
    if args.targets:
        with open(args.targets) as fh:
            doc = json.load(fh)
        targets = dopt.LiftTargets(
            forces_n=tuple(doc["forces_n"]),
            pressures_kpa=tuple(doc["pressures_kpa"]),
            k_force=doc.get("k_force", d_cfg.k_force),
            k_pressure=doc.get("k_pressure", d_cfg.k_pressure),
            k_height=doc.get("k_height", d_cfg.k_height),
            gamma=doc.get("gamma", d_cfg.gamma))
    res = dopt.optimize_design(model, targets, cfg.box.design_box(),
                               n_starts=args.starts or d_cfg.n_starts,
                               seed=cfg.effective_seed())
    report = {"design": _design_to_json(res.design),
              "posterior": res.value,
              "heights_mm": list(res.posterior.heights_mm),
              "f_error": res.posterior.f_error,
              "unreachable": list(res.posterior.unreachable)}
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(report))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    """Synthetic end-to-end benchmark: data -> k-fold train/eval -> report."""
    cfg = load_run_config(args.config)
    seed = cfg.effective_seed()
    rng = np.random.default_rng(seed)
    solver = cfg.solver.solver_config(cfg.material)
    designs = [MembraneDesign(contact_radius=float(r0), thickness=float(t))
               for r0, t in zip(rng.uniform(25.4, 38.1, args.n_designs),
                                rng.uniform(1.5, 3.0, args.n_designs))]
    heights = [5.0, 15.0, 30.0]
    pressures = [1.0, 2.0, 3.0, 4.0, 5.0]
    ds = dsm.generate_synthetic(
        designs, heights, pressures, noise_sd=0.0, seed=seed, solver=solver,
        material_for=lambda d: cfg.material.params(d.thickness))
    folds = dsm.kfold_by_membrane(ds, k=args.k, seed=seed)
    model_cfg = cfg.model.model_config(seed)
    fold_rmse = []
    for train_ds, test_ds in folds:
        res = sg.train(model_cfg, train_ds, test_ds,
                       lr=cfg.training.lr, batch_size=cfg.training.batch_size,
                       max_epochs=cfg.training.max_epochs,
                       patience=cfg.training.patience)
        fold_rmse.append(sg.evaluate_rmse(res.model, test_ds))
    max_force = float(np.max(np.abs(ds.flatten().f)))
    report = {"seed": seed, "n_designs": args.n_designs, "k": args.k,
              "fold_rmse_n": fold_rmse,
              "mean_rmse_n": float(np.mean(fold_rmse)),
              "max_force_n": max_force,
              "rmse_fraction_of_max": float(np.mean(fold_rmse)) / max_force}
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(report))
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    ds = dsm.load(args.data)
    fig, ax = plt.subplots(figsize=(6, 4))
    for rec in ds.records:
        ps = [p for p, _ in rec.samples]
        fs = [f for _, f in rec.samples]
        ax.plot(ps, fs, marker="o", markersize=2,
                label=f"h={rec.height_mm:g} mm")
    ax.set_xlabel("pressure [kPa]")
    ax.set_ylabel("force [N]")
    if len(ds.records) <= 8:
        ax.legend(fontsize=7)
    tmp = f"{args.out}.tmp"
    fig.savefig(tmp, format="svg")
    plt.close(fig)
    os.replace(tmp, args.out)
    print(json.dumps({"out": args.out, "records": len(ds)}))
    return EXIT_OK


def cmd_config_keys(args) -> int:
    print(config_defaults_doc())
    return EXIT_OK


# --- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="membrane-forge",
        description="Simulation and learning toolkit for strain-limited "
                    "pneumatic membrane actuators.",
        epilog="Config keys and defaults:\n" + config_defaults_doc(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="cmd", required=True)

    def add_config(p):
        p.add_argument("--config", default=None,
                       help="run-config JSON (defaults apply if omitted)")

    p = sub.add_parser("simulate", help="solve one membrane state")
    add_config(p)
    p.add_argument("--design", required=True, help="design JSON file")
    p.add_argument("--p-kpa", type=float, required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--height-mm", type=float, default=None)
    g.add_argument("--force-n", type=float, default=None)
    p.add_argument("--out-prefix", default=None,
                   help="write <prefix>.json summary and <prefix>.csv profile")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("sweep", help="force over a height x pressure grid")
    add_config(p)
    p.add_argument("--design", required=True)
    p.add_argument("--heights-mm", required=True)
    p.add_argument("--pressures-kpa", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("gen-data", help="simulator-backed synthetic dataset")
    add_config(p)
    p.add_argument("--designs", required=True, help="JSON list of designs")
    p.add_argument("--heights-mm", required=True)
    p.add_argument("--pressures-kpa", required=True)
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="fit the surrogate force model")
    add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="test-set RMSE of a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("al", help="active-learning session commands")
    al_sub = p.add_subparsers(dest="al_cmd", required=True)
    for name in ("propose", "ingest", "step"):
        q = al_sub.add_parser(name)
        add_config(q)
        q.add_argument("--session", required=True, help="session directory")
        q.add_argument("--data", required=True, help="dataset JSONL")
        if name == "ingest":
            q.add_argument("--records", required=True,
                           help="JSONL of new trial records")
        if name == "step":
            q.add_argument("--oracle", default="sim")
        q.set_defaults(fn=cmd_al)

    p = sub.add_parser("design", help="trajectory prediction / optimization")
    d_sub = p.add_subparsers(dest="design_cmd", required=True)
    q = d_sub.add_parser("waypoints")
    add_config(q)
    q.add_argument("--model", required=True)
    q.add_argument("--design", required=True)
    q.add_argument("--masses", default="1.5,2.5,4")
    q.add_argument("--out", default=None)
    q.set_defaults(fn=cmd_design)
    q = d_sub.add_parser("optimize")
    add_config(q)
    q.add_argument("--model", required=True)
    q.add_argument("--targets", default=None,
                   help="JSON with forces_n, pressures_kpa, optional weights")
    q.add_argument("--starts", type=int, default=None)
    q.add_argument("--out", default=None)
    q.set_defaults(fn=cmd_design)

    p = sub.add_parser("pipeline", help="end-to-end synthetic benchmark")
    add_config(p)
    p.add_argument("--n-designs", type=int, default=8)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("plot", help="SVG force-pressure chart from a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("config-keys", help="list every config key and default")
    p.set_defaults(fn=cmd_config_keys)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MembraneForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
