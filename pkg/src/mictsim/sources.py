"""Modality-specific volumetric heat deposition.

RFA: the probe's Joule heating is represented empirically by a sum of
Gaussian kernels centred on the tine tips, normalized so the continuum
integral of the deposited power equals the applied power.

MWA: a reduced scalar frequency-domain solve for the dominant
transverse-magnetic field component on an axisymmetric r-z half-plane,
with a ring-slot source at the antenna slot, first-order absorbing outer
boundaries and temperature-dependent electromagnetic parameters from
tabulated interpolants. SAR = sigma_eff |E|^2 / 2, revolved about the probe
axis onto the 3D grid. The field amplitude is normalized so the revolved
SAR integral equals input power times (1 - reflected fraction); the
reflected fraction is the estimated share of power leaving through the
absorbing boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .bioheat import SolverError
from .grid import DomainError, GridSpec, Probe, ScalarField

MU0 = 4e-7 * np.pi
EPS0 = 8.8541878128e-12
C0 = 299792458.0


# ---------------------------------------------------------------------------
# RFA empirical Gaussian source

@dataclass(frozen=True)
class RfaSourceSpec:
    """Sum-of-Gaussians deposition: tine tip points (mm), common width
    sigma (mm), total power (W), per-point weights summing to 1."""

    points: np.ndarray
    sigma_mm: float
    power_w: float
    weights: np.ndarray | None = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] < 1 or pts.shape[1] != 3:
            raise ValueError("need at least one 3D tine point")
        object.__setattr__(self, "points", pts)
        if self.sigma_mm <= 0:
            raise ValueError("sigma must be > 0")
        if self.weights is None:
            w = np.full(len(pts), 1.0 / len(pts))
        else:
            w = np.asarray(self.weights, dtype=float)
            if len(w) != len(pts):
                raise ValueError("one weight per point required")
            if abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("weights must sum to 1")
        object.__setattr__(self, "weights", w)


def tine_points(probe: Probe, offsets) -> np.ndarray:
    """World tine positions from probe-frame offsets (axial, lat1, lat2) mm.

    The lateral basis is deterministic: the first lateral axis is the
    normalized cross product of the probe direction with z (or x when the
    probe runs along z).
    """
    d = np.asarray(probe.direction, dtype=float)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(d @ ref) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    out = []
    for a, lx, ly in np.atleast_2d(np.asarray(offsets, dtype=float)):
        out.append(np.asarray(probe.tip) + a * d + lx * e1 + ly * e2)
    return np.array(out)


def rfa_source(spec: RfaSourceSpec, grid: GridSpec) -> ScalarField:
    """Volumetric deposition Q (W/m^3) on the grid.

    Q(x) = sum_i w_i P (2 pi s^2)^(-3/2) exp(-|x-c_i|^2 / (2 s^2)), exact
    superposition of normalized Gaussians; points outside the grid raise.
    """
    inside = grid.contains(spec.points)
    if not np.all(inside):
        raise DomainError("tine points must lie inside the grid")
    s_m = spec.sigma_mm * 1e-3
    norm = spec.power_w * (2.0 * np.pi * s_m ** 2) ** -1.5
    centers = grid.voxel_centers()
    q = np.zeros(grid.n_voxels)
    for w, c in zip(spec.weights, spec.points):
        d2_mm = np.sum((centers - c) ** 2, axis=1)
        q += w * norm * np.exp(-d2_mm * 1e-6 / (2.0 * s_m ** 2))
    return ScalarField(grid, q.reshape(grid.dims), unit="W/m^3")


# ---------------------------------------------------------------------------
# temperature-dependent EM parameters

def em_params_at(T, table) -> tuple:
    """Piecewise-linear (relative permittivity, effective conductivity) at
    temperature T, clamped at the table ends. `table` rows: (T, eps, sigma)."""
    rows = np.atleast_2d(np.asarray(table, dtype=float))
    if rows.shape[0] < 1 or rows.shape[1] != 3:
        raise ValueError("EM table needs rows of (T, eps_r, sigma)")
    temps = rows[:, 0]
    if np.any(np.diff(temps) <= 0):
        raise ValueError("EM table temperatures must increase")
    eps = np.interp(T, temps, rows[:, 1])
    sigma = np.interp(T, temps, rows[:, 2])
    return eps, sigma


# ---------------------------------------------------------------------------
# axisymmetric scalar frequency-domain solve

@dataclass(frozen=True)
class MwaAntennaSpec:
    """Geometry and tables for the reduced axisymmetric antenna solve.

    The r-z domain is probe-local: z = 0 at the tip, negative z along the
    shaft. The radiating slot is a ring at z = -slot_offset_mm.
    """

    frequency_hz: float
    input_power_w: float
    probe_radius_mm: float = 0.9
    slot_offset_mm: float = 5.0
    slot_width_mm: float = 1.5
    dr_mm: float = 0.5
    r_max_mm: float = 40.0
    z_margin_mm: float = 25.0
    em_table: tuple = ((310.0, 43.0, 1.69),)

    def __post_init__(self):
        if self.frequency_hz <= 0:
            raise ValueError("frequency must be > 0")
        rows = np.atleast_2d(np.asarray(self.em_table, dtype=float))
        if rows.shape[0] >= 2 and np.any(np.diff(rows[:, 0]) <= 0):
            raise ValueError("EM table temperatures must increase")

    @property
    def omega(self) -> float:
        return 2.0 * np.pi * self.frequency_hz

    def rz_axes(self):
        """Cell-centre coordinates (r, z) in metres."""
        dr = self.dr_mm * 1e-3
        nr = int(round(self.r_max_mm / self.dr_mm))
        r = (np.arange(nr) + 0.5) * dr
        z_lo = -(self.slot_offset_mm + self.z_margin_mm) * 1e-3
        z_hi = self.z_margin_mm * 1e-3
        nz = int(round((z_hi - z_lo) / (self.dr_mm * 1e-3)))
        z = z_lo + (np.arange(nz) + 0.5) * dr
        return r, z


def solve_helmholtz_rz(r: np.ndarray, z: np.ndarray, k2: np.ndarray,
                       source: np.ndarray, boundary: str = "absorbing",
                       dirichlet_values: np.ndarray | None = None,
                       fixed_mask: np.ndarray | None = None) -> np.ndarray:
    """Finite-volume solve of the cylindrical scalar Helmholtz equation

        (1/r) d/dr(r du/dr) + d2u/dz2 + k2 u = source

    on a cell-centred (r, z) grid. The axis face carries zero flux by
    construction (vanishing face radius). Outer boundaries are first-order
    absorbing (du/dn = -i k u) or Dirichlet from `dirichlet_values` (for
    manufactured-solution verification). `fixed_mask` voxels are held at
    zero (conductor). Direct sparse solve; raises SolverError if the
    factorization fails.
    """
    nr, nz = len(r), len(z)
    dr = r[1] - r[0] if nr > 1 else 1.0
    dz = z[1] - z[0] if nz > 1 else 1.0
    N = nr * nz
    k2 = np.broadcast_to(k2, (nr, nz))
    kloc = np.sqrt(k2.astype(complex))

    def idx(i, j):
        return i * nz + j

    rows, cols, vals = [], [], []
    diag = np.asarray(k2, dtype=complex).copy().ravel()
    rhs = np.asarray(source, dtype=complex).reshape(N).copy()
    fixed = (np.zeros((nr, nz), dtype=bool) if fixed_mask is None
             else np.asarray(fixed_mask, dtype=bool))

    flat = np.arange(N).reshape(nr, nz)

    # radial faces
    for i in range(nr):
        r_lo = r[i] - dr / 2.0
        r_hi = r[i] + dr / 2.0
        if i > 0:
            c = r_lo / (r[i] * dr * dr)
            rows.append(flat[i, :]); cols.append(flat[i - 1, :])
            vals.append(np.full(nz, c, dtype=complex))
            diag[flat[i, :]] -= c
        if i < nr - 1:
            c = r_hi / (r[i] * dr * dr)
            rows.append(flat[i, :]); cols.append(flat[i + 1, :])
            vals.append(np.full(nz, c, dtype=complex))
            diag[flat[i, :]] -= c
    # axial faces
    cz = 1.0 / (dz * dz)
    lo = flat[:, :-1].ravel()
    hi = flat[:, 1:].ravel()
    rows.extend([lo, hi])
    cols.extend([hi, lo])
    vals.extend([np.full(lo.size, cz, dtype=complex)] * 2)
    diag[lo] -= cz
    diag[hi] -= cz

    # outer boundaries
    if boundary == "absorbing":
        # du/dn = -i k u  ->  ghost flux contribution -i k / h on the diagonal
        edge_r = flat[-1, :]
        c = (r[-1] + dr / 2.0) / (r[-1] * dr)
        diag[edge_r] -= 1j * kloc[-1, :] * c
        for edge_z, kk in ((flat[:, 0], kloc[:, 0]), (flat[:, -1], kloc[:, -1])):
            diag[edge_z] -= 1j * kk / dz
    elif boundary == "dirichlet":
        if dirichlet_values is None:
            raise ValueError("dirichlet boundary needs values")
        dv = np.asarray(dirichlet_values, dtype=complex).reshape(nr, nz)
        c = (r[-1] + dr / 2.0) / (r[-1] * dr * dr)
        diag[flat[-1, :]] -= c
        rhs[flat[-1, :]] -= c * dv[-1, :]
        for sl, gv in (((slice(None), 0), dv[:, 0]), ((slice(None), -1), dv[:, -1])):
            diag[flat[sl]] -= cz
            rhs[flat[sl]] -= cz * gv
    else:
        raise ValueError(f"unknown boundary {boundary!r}")

    rows = np.concatenate([np.concatenate(rows), np.arange(N)])
    cols = np.concatenate([np.concatenate(cols), np.arange(N)])
    vals = np.concatenate([np.concatenate(vals), diag])
    # conductor voxels: identity rows forcing u = 0
    fix_flat = fixed.ravel()
    keep = ~(fix_flat[rows] | fix_flat[cols])
    keep |= (rows == cols)
    rows, cols, vals = rows[keep], cols[keep], vals[keep]
    vals = np.where(fix_flat[rows] & (rows == cols), 1.0 + 0j, vals)
    rhs[fix_flat] = 0.0

    A = sp.csr_matrix(sp.coo_matrix((vals, (rows, cols)), shape=(N, N)))
    try:
        u = spsolve(A, rhs)
    except Exception as exc:  # singular factorization
        raise SolverError(f"field solve failed: {exc}") from exc
    if not np.all(np.isfinite(u.real)) or not np.all(np.isfinite(u.imag)):
        raise SolverError("field solve produced non-finite values")
    return u.reshape(nr, nz)


def sar_from_field(E: np.ndarray, sigma_eff) -> np.ndarray:
    """Specific absorption rate sigma_eff |E|^2 / 2; pure in its inputs."""
    return 0.5 * np.asarray(sigma_eff) * np.abs(E) ** 2


@dataclass(frozen=True)
class MwaSolution:
    r: np.ndarray            # m, cell centres
    z: np.ndarray            # m, probe-local (0 at the tip)
    sar: np.ndarray          # (nr, nz), W/m^3, normalized
    field: np.ndarray        # complex, normalized amplitude
    sigma_eff: np.ndarray    # (nr, nz), S/m
    reflected_fraction: float
    input_power_w: float

    @property
    def deposited_power_w(self) -> float:
        dr = self.r[1] - self.r[0]
        dz = self.z[1] - self.z[0]
        ring = 2.0 * np.pi * self.r[:, None] * dr * dz
        return float((self.sar * ring).sum())


def mwa_sar(spec: MwaAntennaSpec, T_rz=310.0) -> MwaSolution:
    """Solve the reduced antenna field at the given r-z temperature slice
    and return the normalized SAR distribution.

    The EM parameter table maps the temperature slice to permittivity and
    conductivity per cell. Amplitude normalization enforces
    deposited power = input power * (1 - reflected fraction).
    """
    r, z = spec.rz_axes()
    nr, nz = len(r), len(z)
    T = np.broadcast_to(np.asarray(T_rz, dtype=float), (nr, nz))
    eps, sigma = em_params_at(T, spec.em_table)
    omega = spec.omega
    k2 = omega ** 2 * MU0 * EPS0 * eps - 1j * omega * MU0 * sigma

    probe_r = spec.probe_radius_mm * 1e-3
    body = (r[:, None] <= probe_r) & (z[None, :] <= 0.0)
    slot_z = -spec.slot_offset_mm * 1e-3
    half = spec.slot_width_mm * 1e-3 / 2.0
    dr = r[1] - r[0]
    ring = ((np.abs(z[None, :] - slot_z) <= half)
            & (r[:, None] > probe_r) & (r[:, None] <= probe_r + 2 * dr))
    if not ring.any():
        raise SolverError("slot ring does not intersect the r-z grid")
    body &= ~ring

    source = np.zeros((nr, nz), dtype=complex)
    source[ring] = 1.0
    u = solve_helmholtz_rz(r, z, k2, source, boundary="absorbing",
                           fixed_mask=body)

    sar_unit = sar_from_field(u, sigma)
    dz = z[1] - z[0]
    ring_vol = 2.0 * np.pi * r[:, None] * dr * dz
    p_abs = float((sar_unit * ring_vol).sum())
    if p_abs <= 0:
        raise SolverError("field solve deposited no power")

    # outward flux through the absorbing boundary (scalar-model estimate)
    flux = np.real(np.sqrt(k2.astype(complex))) / (2.0 * omega * MU0)
    p_out = float(
        (flux[-1, :] * np.abs(u[-1, :]) ** 2
         * 2.0 * np.pi * (r[-1] + dr / 2.0) * dz).sum()
        + (flux[:, 0] * np.abs(u[:, 0]) ** 2 * 2.0 * np.pi * r * dr).sum()
        + (flux[:, -1] * np.abs(u[:, -1]) ** 2 * 2.0 * np.pi * r * dr).sum())
    refl = p_out / (p_abs + p_out)

    target = spec.input_power_w * (1.0 - refl)
    scale2 = target / p_abs
    return MwaSolution(r=r, z=z, sar=sar_unit * scale2,
                       field=u * np.sqrt(scale2), sigma_eff=sigma,
                       reflected_fraction=refl,
                       input_power_w=spec.input_power_w)


def revolve_sar(sol: MwaSolution, grid: GridSpec, probe: Probe,
                supersample: int = 2) -> ScalarField:
    """Map the r-z SAR onto the 3D grid by rotation about the probe axis.

    Each voxel is supersampled (default 2 per axis) and bilinearly
    interpolated in (radius, axial) coordinates; points outside the r-z
    domain deposit nothing.
    """
    tip = np.asarray(probe.tip, dtype=float) * 1e-3
    d = np.asarray(probe.direction, dtype=float)
    dr = sol.r[1] - sol.r[0]
    dz = sol.z[1] - sol.z[0]

    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    q = np.zeros(grid.n_voxels)
    centers_mm = grid.voxel_centers()
    spacing = np.array(grid.spacing)
    for ox in offsets:
        for oy in offsets:
            for oz in offsets:
                pts = (centers_mm + np.array([ox, oy, oz]) * spacing) * 1e-3
                rel = pts - tip
                z_loc = rel @ d
                rad = np.linalg.norm(rel - np.outer(z_loc, d), axis=1)
                ir = (rad - sol.r[0]) / dr
                iz = (z_loc - sol.z[0]) / dz
                q += _bilinear(sol.sar, ir, iz)
    q /= supersample ** 3
    return ScalarField(grid, q.reshape(grid.dims), unit="W/m^3")


def _bilinear(a: np.ndarray, fi: np.ndarray, fj: np.ndarray) -> np.ndarray:
    """Bilinear sample of a[(i, j)] at fractional indices, 0 outside."""
    ni, nj = a.shape
    out = np.zeros(fi.shape)
    ok = (fi >= 0) & (fi <= ni - 1) & (fj >= 0) & (fj <= nj - 1)
    if not ok.any():
        return out
    fi = np.clip(fi[ok], 0, ni - 1)
    fj = np.clip(fj[ok], 0, nj - 1)
    i0 = np.minimum(fi.astype(int), ni - 2)
    j0 = np.minimum(fj.astype(int), nj - 2)
    ti = fi - i0
    tj = fj - j0
    out[ok] = ((1 - ti) * (1 - tj) * a[i0, j0]
               + ti * (1 - tj) * a[i0 + 1, j0]
               + (1 - ti) * tj * a[i0, j0 + 1]
               + ti * tj * a[i0 + 1, j0 + 1])
    return out
