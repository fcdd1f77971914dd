import numpy as np
import pytest

from mictsim.grid import GridSpec, ScalarField
from mictsim.surfaces import (
    MeshDistanceIndex,
    TriangleMesh,
    brute_force_min_distances,
    extract_isosurface,
    point_triangle_distances,
    read_obj,
    sphere_mesh,
    write_obj,
)


def ramp_ball_field(grid, center, radius, width=2.0):
    """Smooth 1-inside / 0-outside ball with a linear ramp of `width` mm."""
    c = grid.voxel_centers()
    r = np.linalg.norm(c - np.asarray(center), axis=1)
    v = np.clip((radius + width / 2 - r) / width, 0.0, 1.0)
    return ScalarField(grid, v.reshape(grid.dims))


class TestExtractIsosurface:
    def test_ball_volume_and_area(self):
        g = GridSpec((40, 40, 40), (1.0, 1.0, 1.0))
        center = (19.5, 19.5, 19.5)
        f = ramp_ball_field(g, center, 10.0)
        mesh = extract_isosurface(f, 0.5)
        vol = mesh.enclosed_volume()
        expect = 4 / 3 * np.pi * 10.0 ** 3
        assert abs(vol - expect) / expect < 0.03
        area = mesh.area()
        assert abs(area - 4 * np.pi * 100) / (4 * np.pi * 100) < 0.03

    def test_level_out_of_range_gives_empty(self):
        g = GridSpec((8, 8, 8), (1, 1, 1))
        f = ScalarField.full(g, 0.0)
        assert extract_isosurface(f, 0.5).is_empty

    def test_boundary_touching_region_closed(self):
        # region fills the whole grid; padding must close the surface
        g = GridSpec((10, 10, 10), (1, 1, 1))
        mesh = extract_isosurface(ScalarField.full(g, 1.0), 0.5)
        assert not mesh.is_empty
        vol = mesh.enclosed_volume()
        assert vol > 9 ** 3  # a closed, grid-filling region


class TestPointTriangleDistance:
    def test_known_cases(self):
        tri = np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0]]], dtype=float)
        # above the interior
        d = point_triangle_distances(np.array([[0.2, 0.2, 1.0]]), tri)
        assert d[0] == pytest.approx(1.0, abs=1e-12)
        # beyond vertex A
        d = point_triangle_distances(np.array([[-1.0, -1.0, 0.0]]), tri)
        assert d[0] == pytest.approx(np.sqrt(2), abs=1e-12)
        # beside edge AB
        d = point_triangle_distances(np.array([[0.5, -2.0, 0.0]]), tri)
        assert d[0] == pytest.approx(2.0, abs=1e-12)
        # on the triangle
        d = point_triangle_distances(np.array([[0.25, 0.25, 0.0]]), tri)
        assert d[0] == pytest.approx(0.0, abs=1e-12)

    def test_random_against_dense_sampling(self):
        rng = np.random.default_rng(1)
        tri = rng.uniform(-1, 1, (1, 3, 3))
        # dense barycentric sampling as an independent lower-resolution oracle
        u = np.linspace(0, 1, 120)
        uu, vv = np.meshgrid(u, u)
        keep = uu + vv <= 1
        bary = np.stack([1 - uu[keep] - vv[keep], uu[keep], vv[keep]], axis=1)
        surf = bary @ tri[0]
        for _ in range(25):
            p = rng.uniform(-2, 2, 3)
            exact = point_triangle_distances(p[None, :], tri)[0]
            approx = np.linalg.norm(surf - p, axis=1).min()
            assert exact <= approx + 1e-9
            assert approx - exact < 0.03  # sampling resolution bound


class TestMeshDistanceIndex:
    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(9)
        mesh = sphere_mesh((0, 0, 0), 10.0, n_theta=6, n_phi=20)  # 200 tris
        assert len(mesh.faces) == 200
        pts = rng.uniform(-15, 15, (50, 3))
        idx = MeshDistanceIndex(mesh)
        fast = idx.min_distances(pts)
        slow = brute_force_min_distances(pts, mesh)
        assert np.array_equal(fast, slow)

    def test_two_meshes_all_pairs(self):
        rng = np.random.default_rng(10)
        m1 = sphere_mesh((0, 0, 0), 8.0, n_theta=10, n_phi=20)
        m2 = sphere_mesh((3, 1, -2), 6.0, n_theta=10, n_phi=20)
        pts = m1.centroids()
        fast = MeshDistanceIndex(m2).min_distances(pts)
        slow = brute_force_min_distances(pts, m2)
        assert np.array_equal(fast, slow)


class TestSphereMesh:
    def test_volume_and_area_converge(self):
        m = sphere_mesh((1, 2, 3), 5.0, n_theta=40, n_phi=80)
        v = m.enclosed_volume()
        assert abs(v - 4 / 3 * np.pi * 125) / (4 / 3 * np.pi * 125) < 0.01
        a = m.area()
        assert abs(a - 4 * np.pi * 25) / (4 * np.pi * 25) < 0.01


class TestObjIO:
    def test_roundtrip(self, tmp_path):
        mesh = sphere_mesh((0, 0, 0), 4.0, n_theta=6, n_phi=8)
        p = tmp_path / "s.obj"
        write_obj(str(p), mesh)
        back = read_obj(str(p))
        assert np.allclose(back.vertices, mesh.vertices, atol=1e-5)
        assert np.array_equal(back.faces, mesh.faces)
