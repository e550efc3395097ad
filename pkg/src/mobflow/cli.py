"""Batch front door: parse a run config, orchestrate solvers, persist artifacts.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 diagnostic failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunSpec, build_initial, parse_config
from .diagnostics import build_report, compare_trajectories, load_states
from .errors import CflViolation, ConfigError, MobflowError, NoConvergence, StepRejected
from .grid import field_norm, save_density
from .jko import StepControls, Trajectory, run_trajectory
from .model import classify_regime
from .plotting import emit_plot
from .reference import run_reference
from .wdist import solve_distance


def _spec_echo(spec: RunSpec) -> dict:
    echo = {}
    for f in dataclasses.fields(spec):
        v = getattr(spec, f.name)
        if isinstance(v, Path):
            v = str(v)
        elif dataclasses.is_dataclass(v) and not isinstance(v, type):
            v = dataclasses.asdict(v)
        elif hasattr(v, "metadata"):
            v = v.metadata()
        echo[f.name] = v
    return echo


def _write_manifest(spec: RunSpec, out: Path, wall_time: float, extra: dict | None = None):
    label = classify_regime(spec.params)
    manifest = {}
    existing = out / "manifest.json"
    if existing.exists():
        # merge with what the run already wrote (e.g. the trajectory record)
        manifest.update(json.loads(existing.read_text()))
    manifest.update(
        {
            "spec": _spec_echo(spec),
            "version": __version__,
            "regime": label.regime.value,
            "critical_p": label.critical_p,
            "wall_time_s": wall_time,
        }
    )
    if extra:
        manifest.update(extra)
    existing.write_text(json.dumps(manifest, indent=1, default=str))


def _trajectory_plots(traj: Trajectory, out: Path) -> None:
    t = traj.times()
    rows = traj.ledger
    emit_plot({"E": (t, [r["E"] for r in rows])}, out / "energy.svg",
              title="energy", xlabel="t", ylabel="E")
    emit_plot({"mass": (t, [r["mass"] for r in rows])}, out / "mass.svg",
              title="mass", xlabel="t", ylabel="mass")
    emit_plot(
        {
            "u_norm": (t, [r["u_norm"] for r in rows]),
            "v_h1": (t, [r["v_h1"] for r in rows]),
        },
        out / "norms.svg",
        title="norms",
        xlabel="t",
    )


def _save_states(states, params, out: Path, ledger: list[dict]) -> None:
    """Snapshot directory in the trajectory format (manifest + field CSVs)."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "params": {
            "p": params.p, "alpha": params.alpha, "chi": params.chi,
            "dim": params.dim, "eps": params.eps, "delta": params.delta,
        },
        "times": [row["t"] for row in ledger],
        "diagnostics": ledger,
    }
    (out / "states.json").write_text(json.dumps(manifest, indent=1))
    for k, (t, u, v) in enumerate(states):
        save_density(u, out / f"u_{k:05d}.csv")
        save_density(v, out / f"v_{k:05d}.csv")


def _cmd_jko(spec: RunSpec, out: Path) -> int:
    u0 = build_initial(spec.grid, spec.initial_u)
    v0 = build_initial(spec.grid, spec.initial_v)
    controls = StepControls(
        n_t=spec.n_t, max_iter=spec.max_iter, tol=spec.tol, sweeps_max=spec.sweeps_max
    )
    traj = run_trajectory(u0, v0, spec.tau, spec.t_end, spec.params, controls)
    traj.save(out, stride=spec.stride)
    report = build_report(traj)
    report.save(out)
    _trajectory_plots(traj, out)
    if not report.passed:
        print(f"diagnostics failed: {report.flags}", file=sys.stderr)
        return 4
    return 0


def _cmd_reference(spec: RunSpec, out: Path) -> int:
    u0 = build_initial(spec.grid, spec.initial_u)
    v0 = build_initial(spec.grid, spec.initial_v)
    snaps = run_reference(
        u0, v0, spec.dt, spec.t_end, spec.params, spec.regularized, stride=spec.stride
    )
    ledger = [
        {
            "k": k, "t": s.t, "mass": s.u.mass(), "min_u": s.u.min(),
            "u_norm": field_norm(s.u, "Lq", spec.params.internal_exponent),
            "v_h1": field_norm(s.v, "H1"), "u_max": s.u.max(),
        }
        for k, s in enumerate(snaps)
    ]
    _save_states([(s.t, s.u, s.v) for s in snaps], spec.params, out, ledger)
    t = [r["t"] for r in ledger]
    emit_plot({"mass": (t, [r["mass"] for r in ledger])}, out / "mass.svg",
              title="mass", xlabel="t")
    emit_plot(
        {"u_norm": (t, [r["u_norm"] for r in ledger]),
         "u_max": (t, [r["u_max"] for r in ledger])},
        out / "norms.svg", title="norms", xlabel="t",
    )
    return 0


def _cmd_wdist(spec: RunSpec, out: Path) -> int:
    mu0 = build_initial(spec.grid, spec.initial_mu0)
    mu1 = build_initial(spec.grid, spec.initial_mu1)
    result = solve_distance(
        mu0, mu1, spec.params, n_t=spec.n_t, max_iter=spec.max_iter, tol=spec.tol
    )
    (out / "distance.json").write_text(json.dumps(result.summary(), indent=1))
    for k, rho in enumerate(result.path.rho):
        if k % spec.stride == 0 or k == len(result.path.rho) - 1:
            save_density(rho, out / f"rho_{k:05d}.csv")
    return 0


def _cmd_compare(spec: RunSpec, out: Path) -> int:
    a = load_states(spec.compare_a)
    b = load_states(spec.compare_b)
    comp = compare_trajectories(a, b)
    with (out / "discrepancy.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["t", "t_other", "u_diff", "v_diff"])
        writer.writeheader()
        writer.writerows(comp["rows"])
    (out / "discrepancy.json").write_text(
        json.dumps({"u_diff_max": comp["u_diff_max"], "v_diff_max": comp["v_diff_max"]},
                   indent=1)
    )
    t = [r["t"] for r in comp["rows"]]
    emit_plot(
        {"u_diff": (t, [r["u_diff"] for r in comp["rows"]]),
         "v_diff": (t, [r["v_diff"] for r in comp["rows"]])},
        out / "discrepancy.svg", title="discrepancy", xlabel="t",
    )
    return 0


def _cmd_diagnose(spec: RunSpec, out: Path) -> int:
    traj = Trajectory.load(spec.trajectory_dir)
    report = build_report(traj)
    report.save(out)
    return 0 if report.passed else 4


def _cmd_sweep(spec: RunSpec, out: Path) -> int:
    workers = int(os.environ.get("MOBFLOW_THREADS", "0")) or None
    jobs = []
    for value in spec.sweep_values:
        sub = dataclasses.replace(spec, command="jko", out_dir=out / f"{spec.sweep_parameter}_{value:g}")
        if spec.sweep_parameter == "tau":
            sub = dataclasses.replace(sub, tau=value)
        elif spec.sweep_parameter == "chi":
            sub = dataclasses.replace(sub, params=dataclasses.replace(spec.params, chi=value))
        elif spec.sweep_parameter == "eps":
            sub = dataclasses.replace(sub, params=dataclasses.replace(spec.params, eps=value))
        jobs.append((value, sub))

    def run_one(job):
        value, sub = job
        code = run_command(sub)
        report_path = Path(sub.out_dir) / "report.json"
        row = {"value": value, "exit": code}
        if report_path.exists():
            rep = json.loads(report_path.read_text())
            row["u_residual_max"] = rep["residuals"]["u_residual_max"]
            row["v_residual_max"] = rep["residuals"]["v_residual_max"]
            row["worst_energy_increase"] = rep["residuals"]["worst_energy_increase"]
        return row

    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(run_one, jobs))
    rows.sort(key=lambda r: r["value"])
    fields = sorted({k for r in rows for k in r})
    with (out / "sweep.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    if all("u_residual_max" in r for r in rows):
        emit_plot(
            {"u_residual": ([r["value"] for r in rows], [r["u_residual_max"] for r in rows])},
            out / "residuals.svg", title=f"residual vs {spec.sweep_parameter}",
            xlabel=spec.sweep_parameter,
        )
    return max((r["exit"] for r in rows), default=0)


_DISPATCH = {
    "jko": _cmd_jko,
    "reference": _cmd_reference,
    "wdist": _cmd_wdist,
    "compare": _cmd_compare,
    "diagnose": _cmd_diagnose,
    "sweep": _cmd_sweep,
}


def run_command(spec: RunSpec) -> int:
    """Execute one validated run spec; returns the process exit code."""
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.random.seed(spec.seed % 2**32)
    start = time.perf_counter()
    stage = spec.command
    try:
        code = _DISPATCH[spec.command](spec, out)
    except (NoConvergence, StepRejected, CflViolation) as exc:
        print(f"solver failure in stage {stage!r}: {exc}", file=sys.stderr)
        _write_manifest(spec, out, time.perf_counter() - start, {"failed_stage": stage})
        return 3
    _write_manifest(spec, out, time.perf_counter() - start)
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mobflow",
        description="Minimizing-movement and finite-volume runs for the "
        "nonlinear-mobility chemotaxis system.",
    )
    parser.add_argument("command", choices=sorted(_DISPATCH), help="run kind")
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--out", default=None, help="output directory override")
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    parser.add_argument(
        "--allow-uncovered", action="store_true", default=None,
        help="run even when parameters fall outside the covered regimes",
    )
    args = parser.parse_args(argv)
    try:
        spec = parse_config(
            args.config, out_dir=args.out, seed=args.seed, allow_uncovered=args.allow_uncovered
        )
        if spec.command != args.command:
            spec = dataclasses.replace(spec, command=args.command)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        return run_command(spec)
    except MobflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
