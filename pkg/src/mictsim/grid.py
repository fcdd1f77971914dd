"""Voxel-grid geometry, scalar fields, label masks, probes and rigid transforms.

Everything here is a plain immutable value: geometry lives in millimetres
(voxel-centre convention, so world coordinate of voxel (0,0,0) is ``origin``),
physical field values carry an explicit unit tag. Operations are pure
functions and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.spatial.transform import Rotation

# Hard cap on total voxel count; large enough for clinical-resolution organs,
# small enough that a typo in a header cannot eat all memory.
MAX_VOXELS = 512 ** 3

EULER_ORDER = "xyz"  # extrinsic x, then y, then z


class GridError(ValueError):
    """Grid mismatch or malformed grid geometry."""


class DomainError(ValueError):
    """A point or region falls outside the grid."""


def _triple(v, name: str, dtype=float) -> tuple:
    t = tuple(dtype(x) for x in v)
    if len(t) != 3:
        raise GridError(f"{name} must have 3 components, got {len(t)}")
    return t


@dataclass(frozen=True)
class GridSpec:
    """Regular structured grid: dims (nx,ny,nz), spacing and origin in mm."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", _triple(self.dims, "dims", int))
        object.__setattr__(self, "spacing", _triple(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))
        if any(d < 2 for d in self.dims):
            raise GridError(f"all dims must be >= 2, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise GridError(f"all spacings must be > 0, got {self.spacing}")
        if self.n_voxels > MAX_VOXELS:
            raise GridError(
                f"voxel count {self.n_voxels} exceeds cap {MAX_VOXELS}")

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-axis voxel-centre coordinates in mm."""
        return tuple(
            self.origin[a] + self.spacing[a] * np.arange(self.dims[a])
            for a in range(3))

    def voxel_centers(self) -> np.ndarray:
        """All voxel centres as an (N,3) array in C (x-major) order, mm."""
        x, y, z = self.axes()
        X, Y, Z = np.meshgrid(x, y, z, indexing="ij")
        return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def world_to_index(self, p: np.ndarray) -> np.ndarray:
        """Continuous (fractional) voxel index of world point(s) p [mm]."""
        p = np.asarray(p, dtype=float)
        return (p - np.array(self.origin)) / np.array(self.spacing)

    def index_to_world(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=float)
        return np.array(self.origin) + ijk * np.array(self.spacing)

    def contains(self, p: np.ndarray) -> np.ndarray:
        """True where p lies inside the voxel-centre bounding box."""
        idx = self.world_to_index(p)
        hi = np.array(self.dims) - 1
        return np.all((idx >= -1e-12) & (idx <= hi + 1e-12), axis=-1)


def _as_grid_array(values, grid: GridSpec, dtype) -> np.ndarray:
    a = np.asarray(values, dtype=dtype)
    if a.size != grid.n_voxels:
        raise GridError(
            f"value count {a.size} does not match grid {grid.dims}")
    a = a.reshape(grid.dims)
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ScalarField:
    """One real value per voxel with a declared unit tag ('K', 'W/m^3', ...)."""

    grid: GridSpec
    values: np.ndarray
    unit: str = ""

    def __post_init__(self):
        a = _as_grid_array(self.values, self.grid, np.float64)
        if not np.all(np.isfinite(a)):
            raise ValueError("ScalarField values must all be finite")
        object.__setattr__(self, "values", a)

    def with_values(self, values) -> "ScalarField":
        return ScalarField(self.grid, values, self.unit)

    @staticmethod
    def full(grid: GridSpec, value: float, unit: str = "") -> "ScalarField":
        return ScalarField(grid, np.full(grid.dims, float(value)), unit)


@dataclass(frozen=True)
class LabelMask:
    """Small-integer region labels per voxel plus an id -> name legend.

    Id 0 is reserved for background and need not appear in the legend.
    """

    grid: GridSpec
    labels: np.ndarray
    legend: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        a = _as_grid_array(self.labels, self.grid, np.uint8)
        object.__setattr__(self, "labels", a)
        legend = {int(k): str(v) for k, v in dict(self.legend).items()}
        if legend.get(0, "background") != "background":
            raise ValueError("label id 0 is reserved for background")
        legend.setdefault(0, "background")
        present = set(int(v) for v in np.unique(a))
        missing = present - set(legend)
        if missing:
            raise ValueError(f"label ids {sorted(missing)} missing from legend")
        object.__setattr__(self, "legend", legend)

    def binary(self) -> np.ndarray:
        """Boolean foreground array (any nonzero label)."""
        return self.labels != 0

    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.labels))

    def volume_ml(self) -> float:
        return self.voxel_count() * self.grid.voxel_volume_mm3 / 1000.0


@dataclass(frozen=True)
class RigidTransform:
    """Rigid motion p' = R(rotation) p + translation; angles rad, translation mm."""

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rotation", _triple(self.rotation, "rotation"))
        object.__setattr__(self, "translation",
                           _triple(self.translation, "translation"))

    def matrix(self) -> np.ndarray:
        return Rotation.from_euler(EULER_ORDER, self.rotation).as_matrix()

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.matrix().T + np.array(self.translation)

    def inverse(self) -> "RigidTransform":
        rot = Rotation.from_euler(EULER_ORDER, self.rotation)
        inv = rot.inv()
        t = -inv.apply(np.array(self.translation))
        return RigidTransform(tuple(inv.as_euler(EULER_ORDER)), tuple(t))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying `other` first, then self."""
        r_s = Rotation.from_euler(EULER_ORDER, self.rotation)
        r_o = Rotation.from_euler(EULER_ORDER, other.rotation)
        r = r_s * r_o
        t = r_s.apply(np.array(other.translation)) + np.array(self.translation)
        return RigidTransform(tuple(r.as_euler(EULER_ORDER)), tuple(t))

    @property
    def is_identity(self) -> bool:
        return (np.allclose(self.rotation, 0.0, atol=1e-12)
                and np.allclose(self.translation, 0.0, atol=1e-12))


PROBE_KINDS = ("RFA", "MWA", "CRYO", "IRE-electrode")


@dataclass(frozen=True)
class Probe:
    """Virtual probe: tip position (mm), unit direction, modality kind."""

    tip: tuple[float, float, float]
    direction: tuple[float, float, float]
    kind: str
    equipment_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tip", _triple(self.tip, "tip"))
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("probe direction must have unit norm (1e-9)")
        object.__setattr__(self, "direction", tuple(float(x) for x in d))
        if self.kind not in PROBE_KINDS:
            raise ValueError(f"unknown probe kind {self.kind!r}")


def _check_same_grid(*fields):
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid != g:
            raise GridError(f"grid mismatch: {f.grid} vs {g}")
    return g


def _harmonic_face(k: np.ndarray, axis: int) -> np.ndarray:
    """Harmonic-mean conductivity on interior faces along `axis`."""
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    a = k[tuple(lo)]
    b = k[tuple(hi)]
    s = a + b
    out = np.zeros_like(s)
    np.divide(2.0 * a * b, s, out=out, where=s > 0)
    return out


def laplacian(f: ScalarField, tissue_k: ScalarField) -> ScalarField:
    """Divergence-form diffusion operator div(k grad f) on the voxel grid.

    Seven-point finite-volume stencil with harmonic-mean face conductivities;
    faces on the domain boundary carry zero flux. Length unit is the grid's
    native mm, so the result is k * d2f/dmm2 for homogeneous k.
    """
    grid = _check_same_grid(f, tissue_k)
    v = f.values
    k = tissue_k.values
    out = np.zeros(grid.dims, dtype=np.float64)
    for axis in range(3):
        h2 = grid.spacing[axis] ** 2
        kf = _harmonic_face(k, axis)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        flux = kf * (v[tuple(hi)] - v[tuple(lo)]) / h2
        out[tuple(lo)] += flux
        out[tuple(hi)] -= flux
    return ScalarField(grid, out, unit=f.unit)


def trilinear_sample(f: ScalarField, p) -> np.ndarray | float:
    """Trilinear interpolation of f at world point(s) p [mm].

    Exact at voxel centres; raises DomainError for points outside the
    voxel-centre bounding box.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    idx = f.grid.world_to_index(pts)
    hi = np.array(f.grid.dims) - 1
    if np.any(idx < -1e-9) or np.any(idx > hi + 1e-9):
        raise DomainError("sample point outside grid bounding box")
    idx = np.clip(idx, 0.0, hi)
    i0 = np.minimum(np.floor(idx).astype(int), hi - 1)
    t = idx - i0
    v = f.values
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    c = np.zeros(len(pts))
    for dx in (0, 1):
        wx = tx if dx else 1.0 - tx
        for dy in (0, 1):
            wy = ty if dy else 1.0 - ty
            for dz in (0, 1):
                wz = tz if dz else 1.0 - tz
                c += wx * wy * wz * v[ix + dx, iy + dy, iz + dz]
    return float(c[0]) if single else c


def transform_mask(m: LabelMask, t: RigidTransform) -> LabelMask:
    """Nearest-neighbour resample of m under rigid motion t onto m's grid.

    A voxel of the output takes the label of the source voxel t^-1 maps it
    to; voxels mapping outside the grid become background.
    """
    grid = m.grid
    centers = grid.voxel_centers()
    src = t.inverse().apply(centers)
    idx = np.rint(grid.world_to_index(src)).astype(np.int64)
    dims = np.array(grid.dims)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    out = np.zeros(grid.n_voxels, dtype=np.uint8)
    ii = idx[inside]
    out[inside] = m.labels[ii[:, 0], ii[:, 1], ii[:, 2]]
    return LabelMask(grid, out.reshape(grid.dims), m.legend)
