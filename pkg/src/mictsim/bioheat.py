"""Implicit time stepping for tissue heat transfer with a perfusion sink,
including the freezing path used by cryoablation.

The governing balance per voxel is

    rho*c dT/dt = div(k grad T) + Q_inst - w*(T - T_body)

discretized backward-Euler on the voxel grid with harmonic-mean face
conductivities (SI units inside; grid geometry converts mm -> m here).
The perfusion sink w*(T - 310 K) is kept implicit, so relaxation toward
body temperature is unconditionally monotone.

Freezing uses the effective heat capacity method: latent heat is folded
into the capacity over the solidus..liquidus (mushy) interval and k is
blended between frozen and unfrozen values. The nonlinear step is written
in enthalpy-balance form and solved by damped Newton iteration with a
backtracking line search, which keeps front voxels from flip-flopping
across the mushy interval when the freeze front crosses cells within one
step, and makes the converged step conserve enthalpy discretely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from .grid import GridSpec, LabelMask, ScalarField

BODY_TEMPERATURE = 310.0  # K

CG_RTOL = 1e-8
CG_MAX_ITER = 2000
PICARD_TOL = 0.01  # K, max |dT| between iterates
PICARD_MAX_ITER = 25


class SolverError(RuntimeError):
    """Linear or nonlinear solve failed; carries diagnostics."""

    def __init__(self, message, residual=None, history=None):
        super().__init__(message)
        self.residual = residual
        self.history = history or []


@dataclass(frozen=True)
class TissueProperties:
    """Per-tissue physical constants (SI).

    Frozen-phase overrides default to the unfrozen values; the solidus /
    liquidus pair bounds the mushy phase-change interval.
    """

    rho: float                  # kg/m^3
    c: float                    # J/kg/K
    k: float                    # W/m/K
    perfusion: float = 0.0      # W/m^3/K, sink coefficient w
    sigma_e: float = 0.0        # S/m
    latent_heat: float = 0.0    # J/kg
    t_solidus: float = 269.15   # K
    t_liquidus: float = 273.15  # K
    rho_frozen: float | None = None
    c_frozen: float | None = None
    k_frozen: float | None = None

    def __post_init__(self):
        if self.rho <= 0 or self.c <= 0 or self.k <= 0:
            raise ValueError("rho, c, k must be positive")
        if self.perfusion < 0:
            raise ValueError("perfusion coefficient must be >= 0")
        if self.latent_heat < 0 or self.sigma_e < 0:
            raise ValueError("latent heat and conductivity must be >= 0")
        if not self.t_solidus < self.t_liquidus:
            raise ValueError("t_solidus must be < t_liquidus")


@dataclass(frozen=True)
class MaterialFields:
    """Per-voxel property arrays expanded from a label mask + tissue table."""

    grid: GridSpec
    rho_c: np.ndarray        # J/m^3/K (unfrozen)
    k: np.ndarray            # W/m/K (unfrozen)
    perfusion: np.ndarray    # W/m^3/K
    sigma: np.ndarray        # S/m
    latent_vol: np.ndarray   # J/m^3
    t_solidus: np.ndarray
    t_liquidus: np.ndarray
    rho_c_frozen: np.ndarray
    k_frozen: np.ndarray

    @classmethod
    def uniform(cls, grid: GridSpec, props: TissueProperties) -> "MaterialFields":
        mask = LabelMask(grid, np.ones(grid.dims, dtype=np.uint8), {1: "tissue"})
        return cls.from_mask(mask, {1: props})

    @classmethod
    def from_mask(cls, mask: LabelMask, tissues: Mapping[int, TissueProperties],
                  tace_ids=()) -> "MaterialFields":
        """Expand per-tissue constants to per-voxel arrays.

        Perfusion is forced to zero inside TACE-marked regions (blocked
        blood supply).
        """
        present = set(int(v) for v in np.unique(mask.labels))
        missing = present - set(tissues)
        if missing:
            raise ValueError(f"no tissue properties for label ids {sorted(missing)}")
        grid = mask.grid
        arrays = {name: np.zeros(grid.dims) for name in
                  ("rho_c", "k", "perfusion", "sigma", "latent_vol",
                   "t_solidus", "t_liquidus", "rho_c_frozen", "k_frozen")}
        for label in present:
            p = tissues[label]
            sel = mask.labels == label
            rho_f = p.rho_frozen if p.rho_frozen is not None else p.rho
            c_f = p.c_frozen if p.c_frozen is not None else p.c
            k_f = p.k_frozen if p.k_frozen is not None else p.k
            arrays["rho_c"][sel] = p.rho * p.c
            arrays["k"][sel] = p.k
            arrays["perfusion"][sel] = 0.0 if label in set(tace_ids) else p.perfusion
            arrays["sigma"][sel] = p.sigma_e
            arrays["latent_vol"][sel] = p.rho * p.latent_heat
            arrays["t_solidus"][sel] = p.t_solidus
            arrays["t_liquidus"][sel] = p.t_liquidus
            arrays["rho_c_frozen"][sel] = rho_f * c_f
            arrays["k_frozen"][sel] = k_f
        return cls(grid=grid, **arrays)


@dataclass(frozen=True)
class ThermalState:
    """Temperature field plus simulated time; carries the last effective
    property fields when the freezing path is active."""

    T: ScalarField
    time: float = 0.0
    c_eff: np.ndarray | None = None
    k_eff: np.ndarray | None = None

    def __post_init__(self):
        if self.T.values.min() <= 0.0:
            raise ValueError("temperatures must stay above 0 K")

    @staticmethod
    def uniform(grid: GridSpec, temperature: float = BODY_TEMPERATURE) -> "ThermalState":
        return ThermalState(ScalarField.full(grid, temperature, unit="K"))


def effective_properties(T, props: TissueProperties):
    """(c_eff, k_eff) of the effective heat capacity method at temperature T.

    c_eff folds the latent heat into the capacity across the mushy interval
    (c + L/(T_liquidus - T_solidus)); below the solidus the frozen capacity
    applies, above the liquidus the unfrozen one. k_eff is interpolated
    linearly between frozen and unfrozen conductivity across the interval.
    Works on scalars or arrays.
    """
    T = np.asarray(T, dtype=float)
    ts, tl = props.t_solidus, props.t_liquidus
    c_f = props.c_frozen if props.c_frozen is not None else props.c
    k_f = props.k_frozen if props.k_frozen is not None else props.k
    c_mushy = props.c + props.latent_heat / (tl - ts)
    c_eff = np.where(T < ts, c_f, np.where(T <= tl, c_mushy, props.c))
    frac = np.clip((T - ts) / (tl - ts), 0.0, 1.0)
    k_eff = k_f + (props.k - k_f) * frac
    if c_eff.ndim == 0:
        return float(c_eff), float(k_eff)
    return c_eff, k_eff


class EnthalpyCurve:
    """Piecewise-linear volumetric enthalpy H(T) [J/m^3], anchored H=0 at
    the solidus, built per voxel from MaterialFields.

    Sensible heat carries the frozen capacity below the solidus and the
    unfrozen one at and above it; the latent content ramps linearly from 0
    to rho*L across the mushy interval, so the mushy slope is the
    effective heat capacity of the phase-change method.
    """

    def __init__(self, m: MaterialFields):
        self.ts = m.t_solidus
        self.tl = m.t_liquidus
        self.width = m.t_liquidus - m.t_solidus
        self.c_frozen = m.rho_c_frozen
        self.c_unfrozen = m.rho_c
        self.latent = m.latent_vol
        self.c_mushy = m.rho_c + m.latent_vol / self.width
        self.h_liquidus = self.c_mushy * self.width

    def enthalpy(self, T: np.ndarray) -> np.ndarray:
        sensible = np.where(T < self.ts, self.c_frozen * (T - self.ts),
                            self.c_unfrozen * (T - self.ts))
        return sensible + self.latent * self.liquid_fraction(T)

    def capacity(self, T: np.ndarray) -> np.ndarray:
        return np.where(T < self.ts, self.c_frozen,
                        np.where(T <= self.tl, self.c_mushy, self.c_unfrozen))

    def liquid_fraction(self, T: np.ndarray) -> np.ndarray:
        return np.clip((T - self.ts) / self.width, 0.0, 1.0)


def k_effective_field(m: MaterialFields, T: np.ndarray) -> np.ndarray:
    frac = np.clip((T - m.t_solidus) / (m.t_liquidus - m.t_solidus), 0.0, 1.0)
    return m.k_frozen + (m.k - m.k_frozen) * frac


def _harmonic(a, b):
    s = a + b
    out = np.zeros_like(s)
    np.divide(2.0 * a * b, s, out=out, where=s > 0)
    return out


def _apply_diffusion(grid: GridSpec, k: np.ndarray, T: np.ndarray,
                     boundary: str, boundary_T: float) -> np.ndarray:
    """Matrix-free action of the (negative) divergence operator used by the
    implicit assembly: out_i = sum_faces c_face (T_i - T_j), with the ghost
    Dirichlet shell included. Voxels held at fixed temperatures must carry
    those values in T; their own rows are meaningless and get masked by the
    caller."""
    out = np.zeros(grid.dims)
    for axis in range(3):
        h2 = (grid.spacing[axis] * 1e-3) ** 2
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        c = _harmonic(k[tuple(lo)], k[tuple(hi)]) / h2
        flux = c * (T[tuple(lo)] - T[tuple(hi)])
        out[tuple(lo)] += flux
        out[tuple(hi)] -= flux
        if boundary == "dirichlet":
            for side in (0, -1):
                sl = [slice(None)] * 3
                sl[axis] = side
                out[tuple(sl)] += k[tuple(sl)] / h2 * (T[tuple(sl)] - boundary_T)
    return out


class Assembly:
    """Sparse backward-Euler system for one (k, capacity, fixed-set) tuple.

    Matrix rows of fixed voxels are identity; links from free voxels into
    fixed ones are folded into the diagonal and reappear as right-hand-side
    contributions, keeping the operator symmetric positive definite.
    """

    def __init__(self, grid: GridSpec, k: np.ndarray, cap_over_dt: np.ndarray,
                 perfusion: np.ndarray, boundary: str = "dirichlet",
                 fixed_mask: np.ndarray | None = None):
        if boundary not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown boundary condition {boundary!r}")
        self.grid = grid
        self.boundary = boundary
        dims = grid.dims
        N = grid.n_voxels
        spacing_m = tuple(s * 1e-3 for s in grid.spacing)
        self.voxel_volume_m3 = float(np.prod(spacing_m))

        fixed = (np.zeros(dims, dtype=bool) if fixed_mask is None
                 else np.asarray(fixed_mask, dtype=bool))
        self.fixed = fixed.ravel()
        free = ~fixed

        flat = np.arange(N).reshape(dims)
        diag = np.where(self.fixed, 1.0, cap_over_dt.ravel() + perfusion.ravel())
        self._base_diag_no_perf = np.where(
            self.fixed, 1.0, cap_over_dt.ravel()).copy()

        rows, cols, vals = [], [], []
        ghost = np.zeros(N)
        flinks_i, flinks_j, flinks_c = [], [], []
        for axis in range(3):
            h2 = spacing_m[axis] ** 2
            lo_sl = [slice(None)] * 3
            hi_sl = [slice(None)] * 3
            lo_sl[axis] = slice(None, -1)
            hi_sl[axis] = slice(1, None)
            kf = _harmonic(k[tuple(lo_sl)], k[tuple(hi_sl)]) / h2
            lo_idx = flat[tuple(lo_sl)].ravel()
            hi_idx = flat[tuple(hi_sl)].ravel()
            c = kf.ravel()
            lo_free = free.ravel()[lo_idx]
            hi_free = free.ravel()[hi_idx]
            both = lo_free & hi_free
            # free-free links: standard symmetric stencil
            rows.append(lo_idx[both]); cols.append(hi_idx[both]); vals.append(-c[both])
            rows.append(hi_idx[both]); cols.append(lo_idx[both]); vals.append(-c[both])
            np.add.at(diag, lo_idx[both], c[both])
            np.add.at(diag, hi_idx[both], c[both])
            # free-fixed links: diagonal + rhs contribution
            fl = lo_free & ~hi_free
            np.add.at(diag, lo_idx[fl], c[fl])
            flinks_i.append(lo_idx[fl]); flinks_j.append(hi_idx[fl]); flinks_c.append(c[fl])
            fh = hi_free & ~lo_free
            np.add.at(diag, hi_idx[fh], c[fh])
            flinks_i.append(hi_idx[fh]); flinks_j.append(lo_idx[fh]); flinks_c.append(c[fh])
            if boundary == "dirichlet":
                for side in (0, -1):
                    sl = [slice(None)] * 3
                    sl[axis] = side
                    bidx = flat[tuple(sl)].ravel()
                    bk = k[tuple(sl)].ravel() / h2
                    sel = free.ravel()[bidx]
                    np.add.at(diag, bidx[sel], bk[sel])
                    np.add.at(ghost, bidx[sel], bk[sel])

        self._flink_i = np.concatenate(flinks_i) if flinks_i else np.zeros(0, int)
        self._flink_j = np.concatenate(flinks_j) if flinks_j else np.zeros(0, int)
        self._flink_c = np.concatenate(flinks_c) if flinks_c else np.zeros(0)

        rows = np.concatenate(rows) if rows else np.zeros(0, int)
        cols = np.concatenate(cols) if cols else np.zeros(0, int)
        vals = np.concatenate(vals) if vals else np.zeros(0)
        all_rows = np.concatenate([rows, np.arange(N)])
        all_cols = np.concatenate([cols, np.arange(N)])
        all_vals = np.concatenate([vals, diag])
        self.A = sp.csr_matrix(
            sp.coo_matrix((all_vals, (all_rows, all_cols)), shape=(N, N)))
        self.A.sum_duplicates()
        self.A.sort_indices()
        self.ghost = ghost
        self._diag = self.A.diagonal().copy()
        # locate diagonal entries inside A.data for in-place perfusion updates
        indptr, indices = self.A.indptr, self.A.indices
        row_of = np.repeat(np.arange(N), np.diff(indptr))
        below = np.bincount(row_of[indices < row_of], minlength=N)
        self._diag_pos = indptr[:-1] + below
        self._perfusion = np.where(self.fixed, 0.0, perfusion.ravel()).copy()

    def set_perfusion(self, perfusion: np.ndarray) -> None:
        w = np.where(self.fixed, 0.0, perfusion.ravel())
        if np.array_equal(w, self._perfusion):
            return
        lap = self._diag - self._base_diag_no_perf - self._perfusion
        self._diag = self._base_diag_no_perf + lap + w
        # rebuild: base diag positions hold cap/dt + laplacian + w
        self.A.data[self._diag_pos] = self._diag
        self._perfusion = w

    @property
    def perfusion(self) -> np.ndarray:
        return self._perfusion

    def rhs(self, cap_over_dt: np.ndarray, T: np.ndarray, q: np.ndarray | None,
            body_T: float, boundary_T: float,
            fixed_values: np.ndarray | float = 0.0) -> np.ndarray:
        b = cap_over_dt.ravel() * T.ravel() + self._perfusion * body_T
        if q is not None:
            b = b + q.ravel()
        b = b + self.ghost * boundary_T
        if self._flink_i.size:
            fv = (np.full(self.grid.n_voxels, float(fixed_values))
                  if np.isscalar(fixed_values) else np.asarray(fixed_values).ravel())
            np.add.at(b, self._flink_i, self._flink_c * fv[self._flink_j])
        if np.any(self.fixed):
            fv = (np.full(self.grid.n_voxels, float(fixed_values))
                  if np.isscalar(fixed_values) else np.asarray(fixed_values).ravel())
            b[self.fixed] = fv[self.fixed]
        return b

    def solve(self, b: np.ndarray, x0: np.ndarray) -> np.ndarray:
        inv_diag = 1.0 / self._diag
        M = LinearOperator(self.A.shape, matvec=lambda x: x * inv_diag)
        x, info = cg(self.A, np.asarray(b).ravel(), x0=x0.ravel().copy(),
                     rtol=CG_RTOL, atol=0.0, M=M, maxiter=CG_MAX_ITER)
        if info != 0:
            res = float(np.linalg.norm(b - self.A @ x) / np.linalg.norm(b))
            raise SolverError(
                f"conjugate gradient failed to converge (info={info})",
                residual=res)
        return x.reshape(self.grid.dims)

    def fixed_face_heat_flow(self, T: np.ndarray,
                             fixed_values: np.ndarray | float) -> float:
        """Net heat flow [W] from free tissue into the fixed voxels."""
        if not self._flink_i.size:
            return 0.0
        fv = (np.full(self.grid.n_voxels, float(fixed_values))
              if np.isscalar(fixed_values) else np.asarray(fixed_values).ravel())
        t = T.ravel()
        per_face = self._flink_c * (t[self._flink_i] - fv[self._flink_j])
        return float(per_face.sum() * self.voxel_volume_m3)

    def shell_heat_flow(self, T: np.ndarray, boundary_T: float) -> float:
        """Net heat flow [W] from the domain out through the Dirichlet shell."""
        return float((self.ghost * (T.ravel() - boundary_T)).sum()
                     * self.voxel_volume_m3)


class BioheatSolver:
    """Reusable stepper for non-freezing thermal runs (constant k, rho*c).

    The sparse system is assembled once; only the right-hand side (and the
    perfusion diagonal, when dead tissue or TACE zeroes it) changes between
    steps.
    """

    def __init__(self, materials: MaterialFields, dt: float,
                 boundary: str = "dirichlet",
                 boundary_T: float = BODY_TEMPERATURE,
                 body_T: float = BODY_TEMPERATURE,
                 fixed_mask: np.ndarray | None = None):
        if dt <= 0:
            raise ValueError("dt must be > 0")
        self.materials = materials
        self.dt = dt
        self.body_T = body_T
        self.boundary_T = boundary_T
        self.cap_over_dt = materials.rho_c / dt
        self.assembly = Assembly(materials.grid, materials.k, self.cap_over_dt,
                                 materials.perfusion, boundary, fixed_mask)

    def step(self, T: np.ndarray, q: np.ndarray | None = None,
             perfusion: np.ndarray | None = None,
             fixed_values: np.ndarray | float | None = None) -> np.ndarray:
        if perfusion is not None:
            self.assembly.set_perfusion(perfusion)
        fv = self.boundary_T if fixed_values is None else fixed_values
        b = self.assembly.rhs(self.cap_over_dt, T, q, self.body_T,
                              self.boundary_T, fv)
        return self.assembly.solve(b, T)


def step_bioheat(state: ThermalState, materials: MaterialFields,
                 q_inst: ScalarField | None, dt: float,
                 boundary_T: float = BODY_TEMPERATURE,
                 boundary: str = "dirichlet",
                 body_T: float = BODY_TEMPERATURE) -> ThermalState:
    """One backward-Euler step of the perfused heat balance.

    Functional wrapper over BioheatSolver for single-shot use; long runs
    should hold a BioheatSolver and reuse its assembly.
    """
    solver = BioheatSolver(materials, dt, boundary, boundary_T, body_T)
    q = None if q_inst is None else q_inst.values
    T_new = solver.step(state.T.values, q)
    return ThermalState(state.T.with_values(T_new), state.time + dt)


@dataclass
class CryoStepResult:
    state: ThermalState
    picard_iterations: int
    probe_heat_w: float      # heat flowing into the probe voxels, W
    shell_heat_w: float      # heat leaving through the domain shell, W
    enthalpy_change_j: float


def step_cryo(state: ThermalState, materials: MaterialFields, dt: float,
              probe_mask: np.ndarray | None, coolant_on: bool,
              coolant_T: float = 113.0,
              boundary: str = "dirichlet",
              boundary_T: float = BODY_TEMPERATURE,
              body_T: float = BODY_TEMPERATURE,
              picard_tol: float = PICARD_TOL,
              picard_max_iter: int = PICARD_MAX_ITER) -> CryoStepResult:
    """One implicit step of the freezing problem.

    The nonlinear backward-Euler system in enthalpy form,

        (H(T') - H(T^n))/dt = div(k(T') grad T') - w(T') (T' - T_body),

    is solved by damped Newton iteration: the Jacobian uses the pointwise
    effective capacity (frozen / mushy / unfrozen slope of the enthalpy
    curve) plus the current-conductivity stencil, and each update is
    backtracked until the enthalpy residual actually decreases. The line
    search is what keeps front voxels from flip-flopping across the mushy
    band when the freeze front crosses cells within one step. Iteration
    stops when the accepted temperature update falls below `picard_tol`
    kelvin; the converged state satisfies the discrete enthalpy balance,
    so boundary-flux and enthalpy bookkeeping agree.

    The probe surface is a Dirichlet boundary at coolant temperature while
    the coolant runs. Perfusion shuts down with the liquid fraction (no
    blood flow in ice).
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    grid = materials.grid
    curve = EnthalpyCurve(materials)
    T_old = state.T.values
    h_old = curve.enthalpy(T_old)
    fixed = probe_mask if (coolant_on and probe_mask is not None) else None

    def residual(T):
        """Enthalpy-balance defect per free voxel, W/m^3."""
        k_eff = k_effective_field(materials, T)
        w_eff = materials.perfusion * curve.liquid_fraction(T)
        r = ((curve.enthalpy(T) - h_old) / dt
             + _apply_diffusion(grid, k_eff, T, boundary, boundary_T)
             + w_eff * (T - body_T))
        if fixed is not None:
            r[fixed] = 0.0
        return r

    T_star = T_old.copy()
    if fixed is not None:
        T_star[fixed] = coolant_T
    r = residual(T_star)
    r_norm = float(np.linalg.norm(r))
    history = []
    converged = False
    it = 0
    for it in range(1, picard_max_iter + 1):
        k_eff = k_effective_field(materials, T_star)
        w_eff = materials.perfusion * curve.liquid_fraction(T_star)
        asm = Assembly(grid, k_eff, curve.capacity(T_star) / dt, w_eff,
                       boundary, fixed)
        dT = asm.solve(-r, np.zeros(grid.dims))
        # backtracking: accept the largest halved step that reduces ||r||
        s = 1.0
        while True:
            T_try = T_star + s * dT
            r_try = residual(T_try)
            n_try = float(np.linalg.norm(r_try))
            if n_try <= (1.0 - 1e-4 * s) * r_norm or s < 1.0 / 64.0:
                break
            s *= 0.5
        delta = float(np.max(np.abs(s * dT)))
        history.append(delta)
        T_star, r, r_norm = T_try, r_try, n_try
        if delta < picard_tol:
            converged = True
            break
    if not converged:
        raise SolverError(
            f"nonlinear iteration did not reach {picard_tol} K in "
            f"{picard_max_iter} iterations", history=history)

    k_final = k_effective_field(materials, T_star)
    asm = Assembly(grid, k_final, curve.capacity(T_star) / dt,
                   materials.perfusion * curve.liquid_fraction(T_star),
                   boundary, fixed)
    probe_w = asm.fixed_face_heat_flow(T_star, coolant_T)
    shell_w = asm.shell_heat_flow(T_star, boundary_T)
    dh = float((curve.enthalpy(T_star) - h_old).sum() * asm.voxel_volume_m3)
    new_state = ThermalState(state.T.with_values(T_star), state.time + dt,
                             c_eff=curve.capacity(T_star), k_eff=k_final)
    return CryoStepResult(new_state, it, probe_w, shell_w, dh)


def rasterize_probe_cylinder(grid: GridSpec, tip, direction,
                             radius_mm: float, length_mm: float) -> np.ndarray:
    """Boolean mask of voxels whose centres lie within `radius_mm` of the
    probe axis segment running from the tip back along the shaft.

    Probes thinner than the voxel pitch would otherwise rasterize to
    nothing, so the voxels the axis passes through are always included.
    """
    centers = grid.voxel_centers()
    tip = np.asarray(tip, dtype=float)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    rel = centers - tip
    s = rel @ d  # axial coordinate, 0 at tip, negative toward entry
    s_clamped = np.clip(s, -length_mm, 0.0)
    closest = tip + s_clamped[:, None] * d
    dist = np.linalg.norm(centers - closest, axis=1)
    mask = (dist <= radius_mm).reshape(grid.dims)

    step = min(grid.spacing) / 2.0
    n_samples = max(2, int(np.ceil(length_mm / step)) + 1)
    axis_pts = tip - np.linspace(0.0, length_mm, n_samples)[:, None] * d
    idx = np.rint(grid.world_to_index(axis_pts)).astype(np.int64)
    dims = np.array(grid.dims)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    ii = idx[inside]
    mask[ii[:, 0], ii[:, 1], ii[:, 2]] = True
    return mask
