"""Electric potential solves for irreversible electroporation.

Per protocol step, the potential solves div(sigma grad phi) = 0 with the
step's potential difference on the anode electrode voxels, zero on the
cathode, and a zero-flux domain shell. The field magnitude |grad phi| is
accumulated pointwise over steps; the lesion is the superlevel set of the
accumulated maximum at a configurable threshold (default 700 V/cm). The
total current through a surface enclosing the anode supplies the
impedance proxy signal used by protocol guards.

Conductivity is temperature- and field-independent within a step; no
electroporation-conductivity feedback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from .bioheat import SolverError, rasterize_probe_cylinder
from .grid import GridSpec, LabelMask, Probe, ScalarField
from .surfaces import TriangleMesh, extract_isosurface

DEFAULT_FIELD_THRESHOLD = 70_000.0  # V/m = 700 V/cm

CG_RTOL = 1e-8
CG_MAX_ITER = 5000


@dataclass(frozen=True)
class ElectrodePair:
    """One pulse configuration: anode/cathode probe ids and the applied
    potential difference."""

    anode: str
    cathode: str
    voltage: float
    active_length_mm: float = 20.0
    radius_mm: float = 0.5

    def __post_init__(self):
        if self.anode == self.cathode:
            raise ValueError("anode and cathode must differ")
        if self.voltage <= 0:
            raise ValueError("potential difference must be > 0")


def electrode_masks(grid: GridSpec, probes: dict[str, Probe],
                    pair: ElectrodePair) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize the pair's electrodes as capped cylinders about the probe
    axes; raises if they overlap or miss the grid."""
    a = probes[pair.anode]
    c = probes[pair.cathode]
    anode = rasterize_probe_cylinder(grid, a.tip, a.direction,
                                     pair.radius_mm, pair.active_length_mm)
    cathode = rasterize_probe_cylinder(grid, c.tip, c.direction,
                                       pair.radius_mm, pair.active_length_mm)
    if not anode.any() or not cathode.any():
        raise SolverError("electrode cylinder does not intersect the grid")
    if np.any(anode & cathode):
        raise SolverError("electrodes overlap")
    return anode, cathode


def solve_potential(sigma: ScalarField, anode_mask: np.ndarray,
                    cathode_mask: np.ndarray, voltage: float) -> ScalarField:
    """Potential field phi [V] for div(sigma grad phi) = 0.

    Dirichlet `voltage` on anode voxels, 0 on cathode voxels, zero-flux
    shell; conjugate gradients to relative residual 1e-8 against a
    Jacobi-preconditioned symmetric system.
    """
    grid = sigma.grid
    sv = sigma.values
    if sv.min() <= 0:
        raise ValueError("conductivity must be positive everywhere")
    anode_mask = np.asarray(anode_mask, dtype=bool)
    cathode_mask = np.asarray(cathode_mask, dtype=bool)
    if np.any(anode_mask & cathode_mask):
        raise SolverError("electrodes overlap")
    fixed = anode_mask | cathode_mask
    if not anode_mask.any() or not cathode_mask.any():
        raise SolverError("both electrodes need at least one voxel")

    N = grid.n_voxels
    flat = np.arange(N).reshape(grid.dims)
    free = ~fixed
    diag = np.where(fixed.ravel(), 1.0, 0.0)
    rows, cols, vals = [], [], []
    rhs = np.zeros(N)
    fixed_values = np.where(anode_mask, float(voltage), 0.0).ravel()

    for axis in range(3):
        h2 = (grid.spacing[axis] * 1e-3) ** 2
        lo_sl = [slice(None)] * 3
        hi_sl = [slice(None)] * 3
        lo_sl[axis] = slice(None, -1)
        hi_sl[axis] = slice(1, None)
        a = sv[tuple(lo_sl)]
        b = sv[tuple(hi_sl)]
        cf = np.zeros_like(a)
        np.divide(2.0 * a * b, a + b, out=cf, where=(a + b) > 0)
        cf = cf / h2
        lo_idx = flat[tuple(lo_sl)].ravel()
        hi_idx = flat[tuple(hi_sl)].ravel()
        c = cf.ravel()
        lo_free = free.ravel()[lo_idx]
        hi_free = free.ravel()[hi_idx]
        both = lo_free & hi_free
        rows.append(lo_idx[both]); cols.append(hi_idx[both]); vals.append(-c[both])
        rows.append(hi_idx[both]); cols.append(lo_idx[both]); vals.append(-c[both])
        np.add.at(diag, lo_idx[both], c[both])
        np.add.at(diag, hi_idx[both], c[both])
        fl = lo_free & ~hi_free
        np.add.at(diag, lo_idx[fl], c[fl])
        np.add.at(rhs, lo_idx[fl], c[fl] * fixed_values[hi_idx[fl]])
        fh = hi_free & ~lo_free
        np.add.at(diag, hi_idx[fh], c[fh])
        np.add.at(rhs, hi_idx[fh], c[fh] * fixed_values[lo_idx[fh]])

    rhs[fixed.ravel()] = fixed_values[fixed.ravel()]
    rows = np.concatenate(rows + [np.arange(N)])
    cols = np.concatenate(cols + [np.arange(N)])
    vals = np.concatenate(vals + [diag])
    A = sp.csr_matrix(sp.coo_matrix((vals, (rows, cols)), shape=(N, N)))

    inv_diag = 1.0 / A.diagonal()
    M = LinearOperator(A.shape, matvec=lambda x: x * inv_diag)
    x0 = np.where(fixed.ravel(), fixed_values, 0.5 * voltage)
    phi, info = cg(A, rhs, x0=x0, rtol=CG_RTOL, atol=0.0, M=M,
                   maxiter=CG_MAX_ITER)
    if info != 0:
        res = float(np.linalg.norm(rhs - A @ phi) / np.linalg.norm(rhs))
        raise SolverError(f"potential solve did not converge (info={info})",
                          residual=res)
    return ScalarField(grid, phi.reshape(grid.dims), unit="V")


def field_magnitude(phi: ScalarField) -> ScalarField:
    """|grad phi| in V/m via central differences (one-sided at the shell)."""
    spacing_m = [s * 1e-3 for s in phi.grid.spacing]
    grads = np.gradient(phi.values, *spacing_m, edge_order=1)
    mag = np.sqrt(sum(g * g for g in grads))
    return ScalarField(phi.grid, mag, unit="V/m")


FIELD_FUNCTIONALS = ("e_mag", "energy_density")


@dataclass(frozen=True)
class FieldAccumulator:
    """Pointwise maximum of the chosen field functional over completed
    steps; non-decreasing by construction."""

    grid: GridSpec
    values: np.ndarray
    functional: str = "e_mag"
    steps: int = 0

    @staticmethod
    def empty(grid: GridSpec, functional: str = "e_mag") -> "FieldAccumulator":
        if functional not in FIELD_FUNCTIONALS:
            raise ValueError(f"unknown field functional {functional!r}")
        return FieldAccumulator(grid, np.zeros(grid.dims), functional, 0)

    def field(self) -> ScalarField:
        unit = "V/m" if self.functional == "e_mag" else "W/m^3"
        return ScalarField(self.grid, self.values, unit=unit)


def accumulate_field(acc: FieldAccumulator, phi: ScalarField,
                     sigma: ScalarField) -> FieldAccumulator:
    """Fold one step's solved potential into the running maximum."""
    if phi.grid != acc.grid or sigma.grid != acc.grid:
        raise ValueError("fields must share the accumulator grid")
    e = field_magnitude(phi).values
    if acc.functional == "energy_density":
        e = 0.5 * sigma.values * e * e
    return FieldAccumulator(acc.grid, np.maximum(acc.values, e),
                            acc.functional, acc.steps + 1)


@dataclass(frozen=True)
class IreLesion:
    mask: LabelMask
    surface: TriangleMesh
    volume_ml: float


def ire_lesion(acc: FieldAccumulator,
               threshold: float = DEFAULT_FIELD_THRESHOLD) -> IreLesion:
    """Superlevel set of the accumulated field at `threshold`."""
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    inside = acc.values >= threshold
    mask = LabelMask(acc.grid, inside.astype(np.uint8), {1: "lesion"})
    surface = extract_isosurface(acc.field(), threshold)
    return IreLesion(mask, surface, mask.volume_ml())


def impedance_proxy(phi: ScalarField, sigma: ScalarField,
                    enclosing_mask: np.ndarray, voltage: float) -> float:
    """Impedance U / I with I the discrete current through the faces of a
    voxel region enclosing the anode.

    Any enclosing region gives the same current up to the solver residual
    (discrete charge conservation). Raises on non-positive current.
    """
    grid = phi.grid
    pv = phi.values
    sv = sigma.values
    mask = np.asarray(enclosing_mask, dtype=bool)
    current = 0.0
    spacing_m = [s * 1e-3 for s in grid.spacing]
    areas = (spacing_m[1] * spacing_m[2], spacing_m[0] * spacing_m[2],
             spacing_m[0] * spacing_m[1])
    for axis in range(3):
        h = spacing_m[axis]
        lo_sl = [slice(None)] * 3
        hi_sl = [slice(None)] * 3
        lo_sl[axis] = slice(None, -1)
        hi_sl[axis] = slice(1, None)
        a = sv[tuple(lo_sl)]
        b = sv[tuple(hi_sl)]
        s_face = np.zeros_like(a)
        np.divide(2.0 * a * b, a + b, out=s_face, where=(a + b) > 0)
        din = mask[tuple(lo_sl)]
        dout = mask[tuple(hi_sl)]
        # faces crossing the region boundary, oriented outward
        out_hi = din & ~dout
        current += float((s_face[out_hi]
                          * (pv[tuple(lo_sl)][out_hi] - pv[tuple(hi_sl)][out_hi])
                          / h * areas[axis]).sum())
        out_lo = dout & ~din
        current += float((s_face[out_lo]
                          * (pv[tuple(hi_sl)][out_lo] - pv[tuple(lo_sl)][out_lo])
                          / h * areas[axis]).sum())
    if current <= 0:
        raise SolverError(f"degenerate potential solve: current {current}")
    return float(voltage) / current
