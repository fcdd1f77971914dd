"""Three-state cell death kinetics and lesion extraction.

Each voxel holds fractions of Alive, Vulnerable and Dead cells with
A + V + D = 1. Alive cells become vulnerable at a temperature-driven
forward rate and recover at a constant backward rate; vulnerable cells
die irreversibly:

    dA/dt = -k_f A + k_b V,   dD/dt = k_f V,   V = 1 - A - D
    k_f   = k_f_bar * exp(T / T_k) * (1 - A)

The rate constants ship as scenario fixtures (the kelvin-argument form of
the published three-state parameterization). Because the forward rate
carries the (1 - A) factor, a state of exactly A = 1 is inert; fields are
seeded with a small vulnerable fraction by default.

The hyperthermia lesion is the region where D exceeds a threshold
(default 0.8). Cryoablation lesions use a lethal-isotherm rule instead
(voxels that ever reached the lethal temperature), optionally requiring
two freeze cycles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridSpec, LabelMask, ScalarField
from .surfaces import TriangleMesh, extract_isosurface

DEFAULT_LESION_THRESHOLD = 0.8

# kelvin-argument equivalents of the published three-state constants
DEFAULT_FORWARD_RATE_SCALE = 3.9211e-6   # 1/s
DEFAULT_BACKWARD_RATE = 7.77e-3          # 1/s
DEFAULT_RATE_TEMPERATURE_SCALE = 40.5    # K

# sub-step bound: k_f * dt_sub <= this
_MAX_RATE_STEP = 0.1


@dataclass(frozen=True)
class DeathModelParams:
    forward_rate_scale: float = DEFAULT_FORWARD_RATE_SCALE
    backward_rate: float = DEFAULT_BACKWARD_RATE
    temperature_scale: float = DEFAULT_RATE_TEMPERATURE_SCALE
    lesion_threshold: float = DEFAULT_LESION_THRESHOLD

    def __post_init__(self):
        if self.forward_rate_scale < 0 or self.backward_rate < 0:
            raise ValueError("rates must be >= 0")
        if self.temperature_scale <= 0:
            raise ValueError("temperature scale must be positive")
        if not 0.0 < self.lesion_threshold < 1.0:
            raise ValueError("lesion threshold must lie in (0, 1)")

    def forward_rate(self, T, alive):
        """k_f = k_f_bar * exp(T/T_k) * (1 - A), clamped non-negative."""
        base = self.forward_rate_scale * np.exp(
            np.asarray(T, dtype=float) / self.temperature_scale)
        return np.maximum(base * np.clip(1.0 - alive, 0.0, 1.0), 0.0)


@dataclass(frozen=True)
class CellStateField:
    """Per-voxel (A, D) fractions; V is derived so A+V+D = 1 holds exactly."""

    grid: GridSpec
    alive: np.ndarray
    dead: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alive, dtype=np.float64).reshape(self.grid.dims)
        d = np.asarray(self.dead, dtype=np.float64).reshape(self.grid.dims)
        for name, arr in (("alive", a), ("dead", d)):
            if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
                raise ValueError(f"{name} fractions must lie in [0, 1]")
        if np.max(a + d) > 1.0 + 1e-9:
            raise ValueError("A + D must not exceed 1")
        a.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "alive", a)
        object.__setattr__(self, "dead", d)

    @property
    def vulnerable(self) -> np.ndarray:
        return 1.0 - self.alive - self.dead

    @staticmethod
    def initial(grid: GridSpec, alive: float = 0.99,
                vulnerable: float = 0.01) -> "CellStateField":
        if alive + vulnerable > 1.0 + 1e-12:
            raise ValueError("initial fractions exceed 1")
        return CellStateField(grid, np.full(grid.dims, alive),
                              np.full(grid.dims, 1.0 - alive - vulnerable))

    def dead_field(self) -> ScalarField:
        return ScalarField(self.grid, self.dead, unit="")


def _integrate_heun(a, d, T, params: DeathModelParams, dt: float, n_sub: int):
    """Heun (RK2) sub-stepped integration of the (A, D) system."""
    h = dt / n_sub
    kb = params.backward_rate
    for _ in range(n_sub):
        v = 1.0 - a - d
        kf = params.forward_rate(T, a)
        da1 = -kf * a + kb * v
        dd1 = kf * v
        a1 = a + h * da1
        d1 = d + h * dd1
        v1 = 1.0 - a1 - d1
        kf1 = params.forward_rate(T, a1)
        da2 = -kf1 * a1 + kb * v1
        dd2 = kf1 * v1
        a = a + 0.5 * h * (da1 + da2)
        d = d + 0.5 * h * (dd1 + dd2)
        # guard fp drift; D stays within [0,1] and V = 1-A-D stays >= 0
        np.clip(a, 0.0, 1.0, out=a)
        np.clip(d, 0.0, 1.0, out=d)
        over = a + d > 1.0
        if np.any(over):
            a[over] = 1.0 - d[over]
    return a, d


def step_death(cells: CellStateField, T: ScalarField,
               params: DeathModelParams, dt: float) -> CellStateField:
    """Advance the cell-state field by dt under temperature field T.

    Explicit sub-stepped RK2; the sub-step is chosen per voxel bucket so
    that rate * sub-step <= 0.1. Voxels where nothing can change (fully
    alive at negligible forward rate) are skipped, which keeps large
    mostly-cold grids cheap.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if T.grid != cells.grid:
        raise ValueError("temperature and cell fields must share a grid")
    a = cells.alive.copy()
    d = cells.dead.copy()
    tv = T.values

    # upper bound on the local rate scale: k_f at (1 - A) = 1, plus k_b
    kf_max = params.forward_rate_scale * np.exp(tv / params.temperature_scale)
    rate = np.maximum(kf_max, params.backward_rate)
    v = 1.0 - a - d
    active = (v > 1e-15) | (kf_max * dt > 1e-12)
    if not np.any(active):
        return CellStateField(cells.grid, a, d)

    n_sub_needed = np.ceil(rate * dt / _MAX_RATE_STEP).astype(np.int64)
    np.clip(n_sub_needed, 1, None, out=n_sub_needed)
    # bucket by power-of-two sub-step count so hot spots don't slow the bulk
    buckets = np.unique(
        2 ** np.ceil(np.log2(n_sub_needed[active])).astype(np.int64))
    levels = np.zeros(cells.grid.dims, dtype=np.int64)
    levels[active] = 2 ** np.ceil(
        np.log2(n_sub_needed[active])).astype(np.int64)
    for n_sub in buckets:
        sel = levels == n_sub
        a_sel, d_sel = _integrate_heun(
            a[sel], d[sel], tv[sel], params, dt, int(n_sub))
        a[sel] = a_sel
        d[sel] = d_sel
    # irreversibility: fp guard only, the scheme never decreases D
    np.maximum(d, cells.dead, out=d)
    return CellStateField(cells.grid, a, d)


@dataclass(frozen=True)
class LesionExtraction:
    mask: LabelMask
    surface: TriangleMesh
    volume_mask_ml: float
    volume_surface_ml: float
    empty: bool


def extract_lesion(cells_or_dead, threshold: float = DEFAULT_LESION_THRESHOLD
                   ) -> LesionExtraction:
    """Binary lesion mask {D >= threshold} plus its iso-surface.

    Volume is reported both ways: voxel count times voxel volume, and the
    divergence-theorem volume of the extracted surface. An empty lesion is
    valid output, flagged via `empty`.
    """
    if isinstance(cells_or_dead, CellStateField):
        dead = cells_or_dead.dead_field()
    else:
        dead = cells_or_dead
    grid = dead.grid
    inside = dead.values >= threshold
    mask = LabelMask(grid, inside.astype(np.uint8), {1: "lesion"})
    surface = extract_isosurface(dead, threshold)
    vol_mask = mask.volume_ml()
    vol_surf = surface.enclosed_volume() / 1000.0
    return LesionExtraction(mask, surface, vol_mask, vol_surf,
                            empty=not bool(inside.any()))


def dead_fraction_monotone_check(history, tol: float = 1e-9) -> bool:
    """True iff D is non-decreasing per voxel across the run."""
    prev = None
    for item in history:
        d = item.dead if isinstance(item, CellStateField) else (
            item.values if isinstance(item, ScalarField) else np.asarray(item))
        if prev is not None and np.any(d < prev - tol):
            return False
        prev = d
    return True


def cryo_lethal_mask(min_temperature_per_cycle, grid: GridSpec,
                     lethal_temperature: float = 233.0,
                     cycles_required: int = 1) -> LabelMask:
    """Lethal-isotherm lesion rule for cryoablation.

    A voxel is dead when it reached the lethal temperature in at least
    `cycles_required` freeze cycles. `min_temperature_per_cycle` is an
    iterable of per-cycle minimum-temperature arrays.
    """
    count = np.zeros(grid.dims, dtype=np.int64)
    for min_T in min_temperature_per_cycle:
        count += np.asarray(min_T) <= lethal_temperature
    dead = count >= max(1, int(cycles_required))
    return LabelMask(grid, dead.astype(np.uint8), {1: "lesion"})
