"""Triangulated isosurfaces and mesh utilities shared by lesion extraction
and validation: extraction, areas/centroids, enclosed volume, exact minimum
point-to-triangle distances with a spatial index, and OBJ-style text I/O.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .grid import ScalarField

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba ships with the environment
    njit = None


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle list; vertices in world mm."""

    vertices: np.ndarray  # (n, 3) float
    faces: np.ndarray     # (m, 3) int

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangle_vertices(self) -> np.ndarray:
        """(m, 3, 3) array of per-face vertex coordinates."""
        return self.vertices[self.faces]

    def centroids(self) -> np.ndarray:
        return self.triangle_vertices().mean(axis=1)

    def areas(self) -> np.ndarray:
        t = self.triangle_vertices()
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return 0.5 * np.linalg.norm(n, axis=1)

    def area(self) -> float:
        return float(self.areas().sum())

    def enclosed_volume(self) -> float:
        """Volume in mm^3 via the divergence theorem (closed mesh assumed)."""
        t = self.triangle_vertices()
        signed = np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2]))
        return float(abs(signed.sum()) / 6.0)

    def transformed(self, transform) -> "TriangleMesh":
        return TriangleMesh(transform.apply(self.vertices), self.faces)


EMPTY_MESH = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def extract_isosurface(field: ScalarField, level: float) -> TriangleMesh:
    """Marching-cubes triangulation of `field` at iso-value `level`.

    The field is padded by one low-valued voxel layer so surfaces that touch
    the domain boundary are closed, keeping enclosed_volume meaningful.
    Returns an empty mesh when the level is outside the field's range.
    """
    v = field.values
    if level > v.max():
        return EMPTY_MESH
    pad_value = level - max(1.0, abs(level))
    padded = np.pad(v, 1, mode="constant", constant_values=pad_value)
    try:
        verts, faces, _normals, _vals = marching_cubes(
            padded, level=level, spacing=field.grid.spacing)
    except (ValueError, RuntimeError):
        return EMPTY_MESH
    verts = verts - np.array(field.grid.spacing) + np.array(field.grid.origin)
    return TriangleMesh(verts, faces)


def point_triangle_distances(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Exact distances from points[i] to triangle tri[i] (paired).

    Classic barycentric region classification; points (n,3), tri (n,3,3).
    Dispatches to a compiled kernel when numba is present; both paths share
    the same arithmetic.
    """
    p = np.ascontiguousarray(points, dtype=np.float64)
    t = np.ascontiguousarray(tri, dtype=np.float64)
    if njit is not None:
        return _pt_tri_kernel(p, t)
    return _point_triangle_distances_numpy(p, t)


def _point_triangle_distances_numpy(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    ap = p - a

    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    closest = np.empty_like(p)

    # vertex regions
    reg_a = (d1 <= 0) & (d2 <= 0)
    reg_b = (d3 >= 0) & (d4 <= d3)
    reg_c = (d6 >= 0) & (d5 <= d6)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    # edge AB
    denom_ab = np.where(d1 - d3 != 0, d1 - d3, 1.0)
    t_ab = np.clip(d1 / denom_ab, 0.0, 1.0)
    reg_ab = (~reg_a) & (~reg_b) & (~reg_c) & (vc <= 0) & (d1 >= 0) & (d3 <= 0)

    # edge AC
    denom_ac = np.where(d2 - d6 != 0, d2 - d6, 1.0)
    t_ac = np.clip(d2 / denom_ac, 0.0, 1.0)
    reg_ac = (~reg_a) & (~reg_b) & (~reg_c) & (~reg_ab) & (vb <= 0) & (d2 >= 0) & (d6 <= 0)

    # edge BC
    denom_bc = np.where((d4 - d3) + (d5 - d6) != 0, (d4 - d3) + (d5 - d6), 1.0)
    t_bc = np.clip((d4 - d3) / denom_bc, 0.0, 1.0)
    reg_bc = ((~reg_a) & (~reg_b) & (~reg_c) & (~reg_ab) & (~reg_ac)
              & (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0))

    interior = ~(reg_a | reg_b | reg_c | reg_ab | reg_ac | reg_bc)
    s = va + vb + vc
    s = np.where(s != 0, s, 1.0)
    u = vb / s
    w = vc / s

    closest[reg_a] = a[reg_a]
    closest[reg_b] = b[reg_b]
    closest[reg_c] = c[reg_c]
    closest[reg_ab] = a[reg_ab] + t_ab[reg_ab, None] * ab[reg_ab]
    closest[reg_ac] = a[reg_ac] + t_ac[reg_ac, None] * ac[reg_ac]
    closest[reg_bc] = b[reg_bc] + t_bc[reg_bc, None] * (c - b)[reg_bc]
    closest[interior] = (a[interior] + u[interior, None] * ab[interior]
                         + w[interior, None] * ac[interior])
    return np.linalg.norm(p - closest, axis=1)


if njit is not None:
    @njit(cache=True)
    def _pt_tri_kernel(points, tri):  # pragma: no cover - compiled
        n = points.shape[0]
        out = np.empty(n)
        for i in range(n):
            px = points[i]
            a = tri[i, 0]
            b = tri[i, 1]
            c = tri[i, 2]
            abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
            acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
            apx, apy, apz = px[0] - a[0], px[1] - a[1], px[2] - a[2]
            d1 = abx * apx + aby * apy + abz * apz
            d2 = acx * apx + acy * apy + acz * apz
            if d1 <= 0.0 and d2 <= 0.0:
                qx, qy, qz = a[0], a[1], a[2]
            else:
                bpx, bpy, bpz = px[0] - b[0], px[1] - b[1], px[2] - b[2]
                d3 = abx * bpx + aby * bpy + abz * bpz
                d4 = acx * bpx + acy * bpy + acz * bpz
                if d3 >= 0.0 and d4 <= d3:
                    qx, qy, qz = b[0], b[1], b[2]
                else:
                    cpx, cpy, cpz = px[0] - c[0], px[1] - c[1], px[2] - c[2]
                    d5 = abx * cpx + aby * cpy + abz * cpz
                    d6 = acx * cpx + acy * cpy + acz * cpz
                    if d6 >= 0.0 and d5 <= d6:
                        qx, qy, qz = c[0], c[1], c[2]
                    else:
                        vc = d1 * d4 - d3 * d2
                        if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
                            denom = d1 - d3
                            t = d1 / denom if denom != 0.0 else 0.0
                            qx = a[0] + t * abx
                            qy = a[1] + t * aby
                            qz = a[2] + t * abz
                        else:
                            vb = d5 * d2 - d1 * d6
                            if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
                                denom = d2 - d6
                                t = d2 / denom if denom != 0.0 else 0.0
                                qx = a[0] + t * acx
                                qy = a[1] + t * acy
                                qz = a[2] + t * acz
                            else:
                                va = d3 * d6 - d5 * d4
                                if (va <= 0.0 and (d4 - d3) >= 0.0
                                        and (d5 - d6) >= 0.0):
                                    denom = (d4 - d3) + (d5 - d6)
                                    t = (d4 - d3) / denom if denom != 0.0 else 0.0
                                    qx = b[0] + t * (c[0] - b[0])
                                    qy = b[1] + t * (c[1] - b[1])
                                    qz = b[2] + t * (c[2] - b[2])
                                else:
                                    s = va + vb + vc
                                    if s != 0.0:
                                        v = vb / s
                                        w = vc / s
                                    else:
                                        v = 0.0
                                        w = 0.0
                                    qx = a[0] + v * abx + w * acx
                                    qy = a[1] + v * aby + w * acy
                                    qz = a[2] + v * abz + w * acz
            dx, dy, dz = px[0] - qx, px[1] - qy, px[2] - qz
            out[i] = np.sqrt(dx * dx + dy * dy + dz * dz)
        return out


class MeshDistanceIndex:
    """Spatial index answering exact minimum point-to-mesh distances.

    Candidate triangles come from a KD-tree over triangle centroids; the
    search radius is widened by the largest centroid-to-vertex span so no
    triangle that could beat the running best is ever pruned. Results are
    bit-identical to a brute-force all-pairs scan.
    """

    def __init__(self, mesh: TriangleMesh):
        if mesh.is_empty:
            raise ValueError("cannot index an empty mesh")
        self.mesh = mesh
        self._tri = mesh.triangle_vertices()
        self._centroids = mesh.centroids()
        spans = np.linalg.norm(
            self._tri - self._centroids[:, None, :], axis=2)
        self._r_tri = spans.max(axis=1)
        self._r_max = float(self._r_tri.max())
        self._tree = cKDTree(self._centroids)

    def min_distances(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        n_tri = len(self._tri)
        k = min(16, n_tri)
        d_c, idx = self._tree.query(p, k=k)
        if k == 1:
            d_c = d_c[:, None]
            idx = idx[:, None]
        # exact distance to the k nearest-centroid candidates
        flat_pts = np.repeat(p, k, axis=0)
        flat_tri = self._tri[idx.ravel()]
        d0 = point_triangle_distances(flat_pts, flat_tri).reshape(-1, k)
        best = d0.min(axis=1)
        out = best.copy()
        # certificate: any unexamined triangle has centroid distance at
        # least the k-th hit, hence surface distance at least that minus
        # the largest triangle radius; when best already beats the bound
        # no wider search can improve it
        if k < n_tri:
            hard = best > d_c[:, -1] - self._r_max
        else:
            hard = np.zeros(len(p), dtype=bool)
        if np.any(hard):
            hp = p[hard]
            radii = best[hard] + self._r_max + 1e-12
            groups = self._tree.query_ball_point(hp, radii)
            lens = np.fromiter((len(g) for g in groups), dtype=np.int64,
                               count=len(groups))
            if int(lens.sum()):
                cand = np.concatenate(
                    [np.asarray(g, dtype=np.int64) for g in groups if g])
                owner = np.repeat(np.arange(len(hp)), lens)
                d = point_triangle_distances(hp[owner], self._tri[cand])
                sub = out[hard]
                np.minimum.at(sub, owner, d)
                out[hard] = sub
        return out


def min_distances_to_mesh(points: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    return MeshDistanceIndex(mesh).min_distances(points)


def brute_force_min_distances(points: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Quadratic all-pairs scan; the independent oracle for the index."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    tri = mesh.triangle_vertices()
    out = np.empty(len(p))
    for i, q in enumerate(p):
        d = point_triangle_distances(
            np.broadcast_to(q, (len(tri), 3)), tri)
        out[i] = d.min()
    return out


def write_obj(path: str, mesh: TriangleMesh) -> None:
    """Vertex/face text listing, mm coordinates, 1-based face indices."""
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write("# triangle surface, mm\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    os.replace(tmp, path)


def read_obj(path: str) -> TriangleMesh:
    verts = []
    faces = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    if not verts:
        return EMPTY_MESH
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64))


def sphere_mesh(center, radius: float, n_theta: int = 24, n_phi: int = 48) -> TriangleMesh:
    """Latitude/longitude sphere triangulation; handy test fixture."""
    cx, cy, cz = center
    theta = np.linspace(0, np.pi, n_theta + 1)
    phi = np.linspace(0, 2 * np.pi, n_phi, endpoint=False)
    verts = [(cx, cy, cz + radius)]
    for t in theta[1:-1]:
        for p in phi:
            verts.append((cx + radius * np.sin(t) * np.cos(p),
                          cy + radius * np.sin(t) * np.sin(p),
                          cz + radius * np.cos(t)))
    verts.append((cx, cy, cz - radius))
    south = len(verts) - 1

    def ring(i):  # index of first vertex of latitude ring i (1-based rings)
        return 1 + (i - 1) * n_phi

    faces = []
    for j in range(n_phi):
        faces.append((0, ring(1) + j, ring(1) + (j + 1) % n_phi))
    for i in range(1, n_theta - 1):
        for j in range(n_phi):
            a = ring(i) + j
            b = ring(i) + (j + 1) % n_phi
            c = ring(i + 1) + j
            d = ring(i + 1) + (j + 1) % n_phi
            faces.append((a, c, b))
            faces.append((b, c, d))
    last = n_theta - 1
    for j in range(n_phi):
        faces.append((south, ring(last) + (j + 1) % n_phi, ring(last) + j))
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64))
