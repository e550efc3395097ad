"""Regular-grid discretization of box domains in 1D/2D with mimetic Neumann operators.

Cell-centered scalar fields and face-centered vector fields on a uniform
tensor grid, together with the discrete gradient/divergence pair, a
conjugate-gradient elliptic solver, an implicit-Euler heat propagator, and
the norms used by the rest of the package.

The gradient and divergence are exact negatives of each other under the
cell/face inner products (both weighted by the cell volume), so the
composite Laplacian is symmetric negative semidefinite and has constants in
its kernel. All zero-flux (Neumann) boundary conditions are built into the
operators: boundary faces always carry the value 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .errors import BadExponent, IoError, NoConvergence, SingularSystem

# Relative CG tolerance and the iteration-cap multiplier (cap = factor * n_cells).
CG_RTOL = 1e-10
CG_MAXITER_FACTOR = 10

# When enabled, every elliptic solve re-checks its residual contract after
# the fact and raises NoConvergence if it is violated.
debug_check_residuals = False


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on a box domain in dimension 1 or 2.

    Attributes
    ----------
    extents : tuple of float
        Per-axis side lengths of the box, all positive.
    cells : tuple of int
        Per-axis cell counts, all at least 2.
    """

    extents: tuple[float, ...]
    cells: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(float(e) for e in self.extents))
        object.__setattr__(self, "cells", tuple(int(n) for n in self.cells))
        if len(self.extents) != len(self.cells):
            raise ValueError("extents and cells must have matching length")
        if len(self.cells) not in (1, 2):
            raise ValueError("only dimensions 1 and 2 are supported")
        if any(e <= 0 for e in self.extents):
            raise ValueError("all extents must be positive")
        if any(n < 2 for n in self.cells):
            raise ValueError("all cell counts must be at least 2")

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def h(self) -> tuple[float, ...]:
        return tuple(e / n for e, n in zip(self.extents, self.cells))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.cells

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells))

    def axis_centers(self, axis: int) -> np.ndarray:
        """Cell-center coordinates along one axis."""
        h = self.h[axis]
        return (np.arange(self.cells[axis]) + 0.5) * h

    def centers(self) -> list[np.ndarray]:
        """Cell-center coordinate arrays, meshgrid-broadcast to the cell shape."""
        axes = [self.axis_centers(a) for a in range(self.dim)]
        if self.dim == 1:
            return axes
        return list(np.meshgrid(*axes, indexing="ij"))

    def face_shape(self, axis: int) -> tuple[int, ...]:
        """Shape of the face array for one axis (including boundary faces)."""
        s = list(self.cells)
        s[axis] += 1
        return tuple(s)

    def metadata(self) -> dict:
        return {"extents": list(self.extents), "cells": list(self.cells)}

    @classmethod
    def from_metadata(cls, meta: dict) -> "Grid":
        return cls(tuple(meta["extents"]), tuple(meta["cells"]))


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class DensityField:
    """Cell-centered scalar field (mass per volume).

    Immutable: the value array is copied on construction and marked
    read-only, so fields are safe to share across threads.
    """

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = _freeze(self.values)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", v)

    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def min(self) -> float:
        return float(self.values.min())

    def max(self) -> float:
        return float(self.values.max())

    def mean(self) -> float:
        return float(self.values.mean())

    def is_probability(self, tol: float = 1e-8) -> bool:
        return self.min() >= -tol and abs(self.mass() - 1.0) <= tol

    def with_values(self, values: np.ndarray) -> "DensityField":
        return DensityField(self.grid, values)


@dataclass(frozen=True)
class FaceField:
    """Face-centered vector field (one array per axis; boundary faces are 0)."""

    grid: Grid
    components: tuple[np.ndarray, ...] = field(default=None)

    def __post_init__(self):
        comps = []
        for axis in range(self.grid.dim):
            c = _freeze(self.components[axis])
            if c.shape != self.grid.face_shape(axis):
                raise ValueError(
                    f"axis-{axis} component shape {c.shape} != {self.grid.face_shape(axis)}"
                )
            if not np.all(np.isfinite(c)):
                raise ValueError("face values must be finite")
            boundary = [_axis_boundary_slice(c, axis, side) for side in (0, -1)]
            if any(np.any(b != 0.0) for b in boundary):
                raise ValueError("boundary faces must carry value 0")
            comps.append(c)
        object.__setattr__(self, "components", tuple(comps))

    @classmethod
    def zeros(cls, grid: Grid) -> "FaceField":
        return cls(grid, tuple(np.zeros(grid.face_shape(a)) for a in range(grid.dim)))

    @classmethod
    def from_interior(cls, grid: Grid, interior: list[np.ndarray]) -> "FaceField":
        """Build a face field from interior-face arrays, padding boundary zeros."""
        comps = []
        for axis in range(grid.dim):
            full = np.zeros(grid.face_shape(axis))
            _interior_faces(full, axis)[...] = interior[axis]
            comps.append(full)
        return cls(grid, tuple(comps))

    def interior(self, axis: int) -> np.ndarray:
        return _interior_faces(self.components[axis], axis)


def _axis_boundary_slice(a: np.ndarray, axis: int, side: int) -> np.ndarray:
    idx = [slice(None)] * a.ndim
    idx[axis] = side
    return a[tuple(idx)]


def _interior_faces(a: np.ndarray, axis: int) -> np.ndarray:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(1, -1)
    return a[tuple(idx)]


def _diff(a: np.ndarray, axis: int) -> np.ndarray:
    return np.diff(a, axis=axis)


# ---------------------------------------------------------------------------
# Differential operators
# ---------------------------------------------------------------------------


def grad_arrays(grid: Grid, values: np.ndarray) -> list[np.ndarray]:
    """Two-point face gradient of a cell array; boundary faces are zero."""
    out = []
    for axis in range(grid.dim):
        g = np.zeros(grid.face_shape(axis))
        _interior_faces(g, axis)[...] = _diff(values, axis) / grid.h[axis]
        out.append(g)
    return out


def div_arrays(grid: Grid, components) -> np.ndarray:
    """Cell divergence of per-axis face arrays (boundary faces assumed zero)."""
    out = np.zeros(grid.shape)
    for axis in range(grid.dim):
        out += _diff(components[axis], axis) / grid.h[axis]
    return out


def discrete_gradient(f: DensityField) -> FaceField:
    """Two-point face difference of a cell field, zero on boundary faces."""
    return FaceField(f.grid, tuple(grad_arrays(f.grid, f.values)))


def discrete_divergence(w: FaceField) -> DensityField:
    """Cell divergence; the exact negative adjoint of :func:`discrete_gradient`."""
    return DensityField(w.grid, div_arrays(w.grid, w.components))


def laplacian_arrays(grid: Grid, values: np.ndarray) -> np.ndarray:
    return div_arrays(grid, grad_arrays(grid, values))


def cell_inner(grid: Grid, a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(a * b) * grid.cell_volume)


def face_inner(grid: Grid, wa, wb) -> float:
    """Inner product of face arrays; every face carries weight cell_volume."""
    return float(sum(np.sum(ca * cb) for ca, cb in zip(wa, wb)) * grid.cell_volume)


# ---------------------------------------------------------------------------
# Elliptic and parabolic solvers
# ---------------------------------------------------------------------------


def _face_coefficients(grid: Grid, a_cells: np.ndarray) -> list[np.ndarray]:
    """Arithmetic-mean face coefficients from a cellwise coefficient."""
    out = []
    for axis in range(grid.dim):
        fc = np.zeros(grid.face_shape(axis))
        lo = np.take(a_cells, range(0, grid.cells[axis] - 1), axis=axis)
        hi = np.take(a_cells, range(1, grid.cells[axis]), axis=axis)
        _interior_faces(fc, axis)[...] = 0.5 * (lo + hi)
        out.append(fc)
    return out


def _weighted_laplacian(grid: Grid, values: np.ndarray, face_coeff) -> np.ndarray:
    comps = []
    for axis in range(grid.dim):
        g = np.zeros(grid.face_shape(axis))
        _interior_faces(g, axis)[...] = (
            _interior_faces(face_coeff[axis], axis) * _diff(values, axis) / grid.h[axis]
        )
        comps.append(g)
    return div_arrays(grid, comps)


def solve_elliptic(
    a,
    c: float,
    rhs: DensityField,
    tol: float = CG_RTOL,
    face_coeff: list[np.ndarray] | None = None,
) -> DensityField:
    """Solve (c*I - div(a*grad)) phi = rhs with zero-flux boundaries.

    Parameters
    ----------
    a : DensityField, ndarray or float
        Cellwise positive diffusion coefficient; face values are arithmetic
        means of the adjacent cells. Ignored when ``face_coeff`` is given.
    c : float
        Nonnegative zeroth-order coefficient. When ``c == 0`` the system is
        pure Neumann: the right-hand side must have zero mean and the
        solution is gauged to zero mean.
    rhs : DensityField
        Right-hand side.
    tol : float
        Relative residual tolerance of the conjugate-gradient iteration.
    face_coeff : list of ndarray, optional
        Precomputed per-axis face coefficients, overriding the arithmetic
        mean of ``a`` (boundary entries are ignored; fluxes there are zero).

    Raises
    ------
    SingularSystem
        If ``c == 0`` and the right-hand side mean is not negligible.
    NoConvergence
        If the iteration cap (10x total cells) is reached.
    """
    grid = rhs.grid
    if c < 0:
        raise ValueError("zeroth-order coefficient must be nonnegative")
    if face_coeff is None:
        if a is None:
            raise ValueError("need a cellwise coefficient or explicit face coefficients")
        if isinstance(a, DensityField):
            a_cells = a.values
        else:
            a_cells = np.broadcast_to(np.asarray(a, dtype=float), grid.shape)
        if np.any(a_cells <= 0):
            raise ValueError("diffusion coefficient must be positive cellwise")
        face_coeff = _face_coefficients(grid, a_cells)

    b = rhs.values.copy()
    rhs_norm = float(np.linalg.norm(b.ravel()))
    if c == 0.0:
        mean = float(b.mean())
        if abs(mean) > tol * max(rhs_norm, 1.0):
            raise SingularSystem(
                f"pure-Neumann solve needs zero-mean rhs (mean={mean:.3e})"
            )
        b -= mean  # remove roundoff-level incompatibility

    shape = grid.shape
    n = grid.n_cells

    def apply_op(x_flat):
        x = x_flat.reshape(shape)
        return (c * x - _weighted_laplacian(grid, x, face_coeff)).ravel()

    op = LinearOperator((n, n), matvec=apply_op)
    maxiter = CG_MAXITER_FACTOR * n
    x, info = cg(op, b.ravel(), rtol=tol, atol=0.0, maxiter=maxiter)
    if info != 0:
        raise NoConvergence(f"elliptic CG did not converge within {maxiter} iterations")
    phi = x.reshape(shape)
    if c == 0.0:
        phi = phi - phi.mean()
    if debug_check_residuals:
        res = float(np.linalg.norm(apply_op(phi.ravel()) - b.ravel()))
        if res > 10.0 * tol * max(rhs_norm, 1.0):
            raise NoConvergence(f"elliptic residual contract violated: {res:.3e}")
    return DensityField(grid, phi)


def heat_step(f: DensityField, delta: float, h_t: float, substeps: int) -> DensityField:
    """Diffuse a field by ``substeps`` implicit-Euler solves covering time ``h_t``.

    Approximates the zero-flux heat propagator with diffusivity ``delta``.
    Mass is conserved exactly (the mean is restored after each solve) and
    the minimum cannot drop below the initial minimum beyond solver noise.
    """
    if delta <= 0 or h_t <= 0:
        raise ValueError("delta and h_t must be positive")
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    dt = h_t / substeps
    grid = f.grid
    values = f.values
    mean0 = float(values.mean())
    for _ in range(substeps):
        sol = solve_elliptic(1.0, 1.0 / (delta * dt), DensityField(grid, values / (delta * dt)))
        values = sol.values + (mean0 - sol.values.mean())
    return DensityField(grid, values)


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------


def field_norm(f: DensityField, kind: str = "L2", q: float | None = None) -> float:
    """Evaluate a field norm.

    ``kind`` is ``"Lq"`` (with exponent ``q >= 1``), ``"L1"``, ``"L2"``,
    ``"Linf"``, or ``"H1"``. The H1 norm squares to the L2 norm squared plus
    the face-gradient energy.
    """
    grid = f.grid
    vol = grid.cell_volume
    if kind == "Linf":
        return float(np.abs(f.values).max())
    if kind in ("L1", "L2"):
        q = 1.0 if kind == "L1" else 2.0
        kind = "Lq"
    if kind == "Lq":
        if q is None or q < 1:
            raise BadExponent(f"Lq norm needs q >= 1, got {q}")
        return float((np.abs(f.values) ** q).sum() * vol) ** (1.0 / q)
    if kind == "H1":
        l2sq = float((f.values**2).sum() * vol)
        g = grad_arrays(grid, f.values)
        gsq = float(sum((gi**2).sum() for gi in g) * vol)
        return float(np.sqrt(l2sq + gsq))
    raise ValueError(f"unknown norm kind {kind!r}")


def gradient_energy(f: DensityField) -> float:
    """Face-gradient energy sum |grad f|^2 * facevol (the H1 seminorm squared)."""
    g = grad_arrays(f.grid, f.values)
    return float(sum((gi**2).sum() for gi in g) * f.grid.cell_volume)


# ---------------------------------------------------------------------------
# Serialization: CSV values + JSON sidecar with grid metadata
# ---------------------------------------------------------------------------


def save_density(f: DensityField, csv_path) -> None:
    """Write a density field as ``indices..., value`` rows plus a JSON sidecar."""
    csv_path = Path(csv_path)
    try:
        with csv_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            header = [f"i{a}" for a in range(f.grid.dim)] + ["value"]
            writer.writerow(header)
            for idx in np.ndindex(*f.grid.shape):
                writer.writerow([*idx, repr(float(f.values[idx]))])
        sidecar = csv_path.with_suffix(csv_path.suffix + ".json")
        sidecar.write_text(json.dumps({"kind": "density", **f.grid.metadata()}, indent=1))
    except OSError as exc:
        raise IoError(f"cannot write field to {csv_path}: {exc}") from exc


def load_density(csv_path) -> DensityField:
    csv_path = Path(csv_path)
    sidecar = csv_path.with_suffix(csv_path.suffix + ".json")
    try:
        meta = json.loads(sidecar.read_text())
        grid = Grid.from_metadata(meta)
        values = np.zeros(grid.shape)
        with csv_path.open() as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                idx = tuple(int(x) for x in row[:-1])
                values[idx] = float(row[-1])
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise IoError(f"cannot read field from {csv_path}: {exc}") from exc
    return DensityField(grid, values)


def save_faces(w: FaceField, csv_path) -> None:
    """Write a face field as ``axis, indices..., value`` rows plus a sidecar."""
    csv_path = Path(csv_path)
    try:
        with csv_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["axis"] + [f"i{a}" for a in range(w.grid.dim)] + ["value"])
            for axis in range(w.grid.dim):
                comp = w.components[axis]
                for idx in np.ndindex(*comp.shape):
                    writer.writerow([axis, *idx, repr(float(comp[idx]))])
        sidecar = csv_path.with_suffix(csv_path.suffix + ".json")
        sidecar.write_text(json.dumps({"kind": "faces", **w.grid.metadata()}, indent=1))
    except OSError as exc:
        raise IoError(f"cannot write field to {csv_path}: {exc}") from exc


def load_faces(csv_path) -> FaceField:
    csv_path = Path(csv_path)
    sidecar = csv_path.with_suffix(csv_path.suffix + ".json")
    try:
        meta = json.loads(sidecar.read_text())
        grid = Grid.from_metadata(meta)
        comps = [np.zeros(grid.face_shape(a)) for a in range(grid.dim)]
        with csv_path.open() as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                axis = int(row[0])
                idx = tuple(int(x) for x in row[1:-1])
                comps[axis][idx] = float(row[-1])
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise IoError(f"cannot read field from {csv_path}: {exc}") from exc
    return FaceField(grid, tuple(comps))
