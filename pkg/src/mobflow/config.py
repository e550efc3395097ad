"""Run configuration: TOML parsing, validation, and initial-data presets."""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .grid import DensityField, Grid
from .model import ModelParams, classify_regime

COMMANDS = ("wdist", "jko", "reference", "compare", "diagnose", "sweep")
PRESETS = ("uniform", "cosine-perturbed", "gaussian-bump", "bump", "two-bumps")


@dataclass
class InitialSpec:
    """One named initial-datum preset with its parameters."""

    preset: str = "uniform"
    amplitude: float = 0.1
    scale: float = 1.0
    center: tuple[float, ...] = (0.5,)
    centers: tuple[float, ...] = (0.3, 0.6)
    width: float = 0.2
    modes: tuple[int, ...] = (1,)
    normalize: bool = True


@dataclass
class RunSpec:
    """Validated description of one batch run."""

    command: str
    grid: Grid
    params: ModelParams
    tau: float = 1e-3
    t_end: float = 0.05
    dt: float | None = None
    n_t: int = 16
    max_iter: int = 20000
    tol: float = 1e-6
    sweeps_max: int = 5
    regularized: bool = True
    stride: int = 1
    initial_u: InitialSpec = field(default_factory=InitialSpec)
    initial_v: InitialSpec = field(default_factory=InitialSpec)
    initial_mu0: InitialSpec = field(default_factory=InitialSpec)
    initial_mu1: InitialSpec = field(default_factory=InitialSpec)
    out_dir: Path = Path("runs/out")
    seed: int = 0
    allow_uncovered: bool = False
    compare_a: Path | None = None
    compare_b: Path | None = None
    trajectory_dir: Path | None = None
    sweep_parameter: str | None = None
    sweep_values: tuple[float, ...] = ()


def build_initial(grid: Grid, spec: InitialSpec) -> DensityField:
    """Materialize a preset on a grid.

    Probability presets are normalized to unit mass; the ``scale`` factor
    applies afterwards (use it for non-probability fields like the chemical
    concentration).
    """
    centers = grid.centers()
    name = spec.preset
    if name == "uniform":
        values = np.ones(grid.shape)
    elif name == "cosine-perturbed":
        values = np.ones(grid.shape)
        pert = np.ones(grid.shape)
        for a in range(grid.dim):
            m = spec.modes[a] if a < len(spec.modes) else spec.modes[-1]
            pert = pert * np.cos(m * np.pi * centers[a] / grid.extents[a])
        values = values + spec.amplitude * pert
    elif name == "gaussian-bump":
        values = np.ones(grid.shape)
        for a in range(grid.dim):
            c = spec.center[a] if a < len(spec.center) else spec.center[-1]
            s = spec.width / 4.0
            values = values * np.exp(-0.5 * ((centers[a] - c) / s) ** 2)
    elif name == "bump":
        values = np.ones(grid.shape)
        for a in range(grid.dim):
            c = spec.center[a] if a < len(spec.center) else spec.center[-1]
            r = (centers[a] - c) / spec.width
            values = values * np.where(np.abs(r) <= 0.5, np.cos(np.pi * r) ** 2, 0.0)
    elif name == "two-bumps":
        values = np.zeros(grid.shape)
        for c0 in spec.centers:
            part = np.ones(grid.shape)
            for a in range(grid.dim):
                r = (centers[a] - c0) / spec.width
                part = part * np.where(np.abs(r) <= 0.5, np.cos(np.pi * r) ** 2, 0.0)
            values = values + part
    else:
        raise ConfigError(f"unknown preset {name!r}; valid: {PRESETS}")
    if spec.normalize:
        mass = values.sum() * grid.cell_volume
        if mass <= 0:
            raise ConfigError(f"preset {name!r} produced a nonpositive mass")
        values = values / mass
    return DensityField(grid, spec.scale * values)


def _initial_from_table(table: dict, default_normalize: bool) -> InitialSpec:
    return InitialSpec(
        preset=table.get("preset", "uniform"),
        amplitude=float(table.get("amplitude", 0.1)),
        scale=float(table.get("scale", 1.0)),
        center=tuple(_as_tuple(table.get("center", (0.5,)))),
        centers=tuple(_as_tuple(table.get("centers", (0.3, 0.6)))),
        width=float(table.get("width", 0.2)),
        modes=tuple(int(m) for m in _as_tuple(table.get("modes", (1,)))),
        normalize=bool(table.get("normalize", default_normalize)),
    )


def _as_tuple(x):
    if isinstance(x, (list, tuple)):
        return tuple(x)
    return (x,)


def parse_config(
    path, out_dir=None, seed: int | None = None, allow_uncovered: bool | None = None
) -> RunSpec:
    """Parse and validate a TOML run configuration.

    All violations are collected and reported together in the
    :class:`ConfigError` message, each prefixed with its field path.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc

    errors: list[str] = []

    command = raw.get("command", "jko")
    if command not in COMMANDS:
        errors.append(f"command: {command!r} is not one of {COMMANDS}")

    dom = raw.get("domain", {})
    extents = tuple(float(e) for e in _as_tuple(dom.get("extents", (1.0,))))
    cells = tuple(int(c) for c in _as_tuple(dom.get("cells", (64,))))
    grid = None
    try:
        grid = Grid(extents, cells)
    except ValueError as exc:
        errors.append(f"domain: {exc}")

    model = raw.get("model", {})
    params = None
    try:
        params = ModelParams(
            p=float(model.get("p", 1.5)),
            alpha=float(model.get("alpha", 0.5)),
            chi=float(model.get("chi", 1.0)),
            dim=len(cells),
            eps=float(model.get("eps", 1e-2)),
            delta=float(model.get("delta", 1.0)),
        )
    except ValueError as exc:
        errors.append(f"model: {exc}")

    disc = raw.get("discretization", {})
    tau = float(disc.get("tau", 1e-3))
    t_end = float(disc.get("t_end", 0.05))
    dt = disc.get("dt")
    dt = None if dt is None else float(dt)
    n_t = int(disc.get("n_t", 16))
    stride = int(disc.get("stride", 1))
    if tau <= 0:
        errors.append("discretization.tau: must be positive")
    if t_end < 0:
        errors.append("discretization.t_end: must be nonnegative")
    if dt is not None and dt <= 0:
        errors.append("discretization.dt: must be positive")
    if n_t < 1:
        errors.append("discretization.n_t: must be at least 1")
    if stride < 1:
        errors.append("discretization.stride: must be at least 1")

    solver = raw.get("solver", {})
    max_iter = int(solver.get("max_iter", 20000))
    tol = float(solver.get("tol", 1e-6))
    sweeps_max = int(solver.get("sweeps_max", 5))
    if max_iter < 1:
        errors.append("solver.max_iter: must be at least 1")
    if tol <= 0:
        errors.append("solver.tol: must be positive")

    init = raw.get("initial", {})
    initial_u = _initial_from_table(init.get("u", {}), default_normalize=True)
    initial_v = _initial_from_table(init.get("v", {"preset": "uniform", "normalize": False}),
                                    default_normalize=False)
    initial_mu0 = _initial_from_table(init.get("mu0", {}), default_normalize=True)
    initial_mu1 = _initial_from_table(
        init.get("mu1", {"preset": "cosine-perturbed"}), default_normalize=True
    )
    for label, ispec in (
        ("initial.u", initial_u),
        ("initial.v", initial_v),
        ("initial.mu0", initial_mu0),
        ("initial.mu1", initial_mu1),
    ):
        if ispec.preset not in PRESETS:
            errors.append(f"{label}.preset: {ispec.preset!r} is not one of {PRESETS}")
        if ispec.width <= 0:
            errors.append(f"{label}.width: must be positive")

    output = raw.get("output", {})
    resolved_out = Path(out_dir) if out_dir is not None else Path(output.get("dir", "runs/out"))
    if resolved_out.exists() and not resolved_out.is_dir():
        errors.append(f"output.dir: {resolved_out} exists and is not a directory")
    else:
        probe = resolved_out
        while not probe.exists():
            parent = probe.parent
            if parent == probe:
                break
            probe = parent
        if probe.exists() and not os.access(probe, os.W_OK):
            errors.append(f"output.dir: {resolved_out} is not writable")
    resolved_seed = int(seed if seed is not None else output.get("seed", 0))
    resolved_allow = bool(
        allow_uncovered if allow_uncovered is not None else raw.get("allow_uncovered", False)
    )

    if params is not None and not resolved_allow:
        label = classify_regime(params)
        if not label.covered:
            errors.append(
                "model: parameters fall outside the covered existence regimes "
                f"(critical p = {label.critical_p:.6g}, need p in (critical, 1+alpha] "
                "with the matching alpha window, or p = critical with dim >= 3); "
                "pass allow_uncovered to run anyway"
            )

    compare = raw.get("compare", {})
    compare_a = compare.get("a")
    compare_b = compare.get("b")
    if command == "compare":
        if compare_a is None or compare_b is None:
            errors.append("compare: needs both 'a' and 'b' trajectory directories")
    traj_dir = raw.get("diagnose", {}).get("trajectory")
    if command == "diagnose" and traj_dir is None:
        errors.append("diagnose: needs a 'trajectory' directory")

    sweep = raw.get("sweep", {})
    sweep_parameter = sweep.get("parameter")
    sweep_values = tuple(float(v) for v in sweep.get("values", ()))
    if command == "sweep":
        if sweep_parameter not in ("tau", "chi", "eps"):
            errors.append("sweep.parameter: must be one of 'tau', 'chi', 'eps'")
        if len(sweep_values) == 0:
            errors.append("sweep.values: must be a nonempty list")

    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))

    return RunSpec(
        command=command,
        grid=grid,
        params=params,
        tau=tau,
        t_end=t_end,
        dt=dt,
        n_t=n_t,
        max_iter=max_iter,
        tol=tol,
        sweeps_max=sweeps_max,
        regularized=bool(raw.get("regularized", True)),
        stride=stride,
        initial_u=initial_u,
        initial_v=initial_v,
        initial_mu0=initial_mu0,
        initial_mu1=initial_mu1,
        out_dir=resolved_out,
        seed=resolved_seed,
        allow_uncovered=resolved_allow,
        compare_a=None if compare_a is None else Path(compare_a),
        compare_b=None if compare_b is None else Path(compare_b),
        trajectory_dir=None if traj_dir is None else Path(traj_dir),
        sweep_parameter=sweep_parameter,
        sweep_values=sweep_values,
    )
