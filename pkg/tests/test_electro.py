import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from mictsim.bioheat import SolverError
from mictsim.electro import (
    DEFAULT_FIELD_THRESHOLD,
    ElectrodePair,
    FieldAccumulator,
    accumulate_field,
    electrode_masks,
    field_magnitude,
    impedance_proxy,
    ire_lesion,
    solve_potential,
)
from mictsim.grid import GridSpec, Probe, ScalarField


def plate_fixture(n=21, spacing=2.0, sigma=0.2, voltage=1000.0):
    """Opposite x-faces as electrodes: analytic parallel-plate field."""
    g = GridSpec((n, n, n), (spacing, spacing, spacing))
    sig = ScalarField.full(g, sigma, unit="S/m")
    anode = np.zeros(g.dims, dtype=bool)
    anode[0] = True
    cathode = np.zeros(g.dims, dtype=bool)
    cathode[-1] = True
    phi = solve_potential(sig, anode, cathode, voltage)
    return g, sig, anode, cathode, phi


class TestSolvePotential:
    def test_parallel_plate_uniform_field(self):
        # 1000 V across 40 mm -> 25 000 V/m, uniform within 1 %
        g, sig, anode, cathode, phi = plate_fixture(n=21, spacing=2.0)
        e = field_magnitude(phi).values
        interior = e[2:-2, 2:-2, 2:-2]
        expect = 1000.0 / 0.04
        assert np.max(np.abs(interior - expect)) / expect < 0.01
        # potential is linear in x
        x_line = phi.values[:, 10, 10]
        lin = np.linspace(1000.0, 0.0, 21)
        assert np.max(np.abs(x_line - lin)) < 1.0

    def test_linearity_in_voltage(self):
        g, sig, anode, cathode, phi1 = plate_fixture(voltage=500.0)
        phi2 = solve_potential(sig, anode, cathode, 1000.0)
        assert np.max(np.abs(phi2.values - 2.0 * phi1.values)) < 1e-9 * 1000.0

    def test_matches_dense_direct_solve(self):
        # random conductivity on a 17^3 grid vs an independent dense solve
        rng = np.random.default_rng(17)
        n = 17
        g = GridSpec((n, n, n), (1.0, 1.0, 1.0))
        sv = 0.1 + rng.random(g.dims)
        sig = ScalarField(g, sv, unit="S/m")
        anode = np.zeros(g.dims, dtype=bool)
        anode[3:6, 7:10, 7:10] = True
        cathode = np.zeros(g.dims, dtype=bool)
        cathode[11:14, 7:10, 7:10] = True
        phi = solve_potential(sig, anode, cathode, 1500.0)

        # independent assembly: dense matrix built voxel by voxel
        N = n ** 3
        h2 = (1.0e-3) ** 2

        def lin(i, j, l):
            return (i * n + j) * n + l

        A = np.zeros((N, N))
        b = np.zeros(N)
        fixed_v = np.where(anode, 1500.0, 0.0)
        fixed = anode | cathode
        for i in range(n):
            for j in range(n):
                for l in range(n):
                    r = lin(i, j, l)
                    if fixed[i, j, l]:
                        A[r, r] = 1.0
                        b[r] = fixed_v[i, j, l]
                        continue
                    for di, dj, dl in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                       (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                        ii, jj, ll = i + di, j + dj, l + dl
                        if not (0 <= ii < n and 0 <= jj < n and 0 <= ll < n):
                            continue
                        sa, sb = sv[i, j, l], sv[ii, jj, ll]
                        c = 2 * sa * sb / (sa + sb) / h2
                        A[r, r] += c
                        if fixed[ii, jj, ll]:
                            b[r] += c * fixed_v[ii, jj, ll]
                        else:
                            A[r, lin(ii, jj, ll)] -= c
        expect = np.linalg.solve(A, b).reshape(g.dims)
        assert np.max(np.abs(phi.values - expect)) / 1500.0 < 1e-6

    def test_maximum_principle(self):
        rng = np.random.default_rng(5)
        g = GridSpec((12, 12, 12), (1.5, 1.5, 1.5))
        sig = ScalarField(g, 0.1 + rng.random(g.dims), unit="S/m")
        anode = np.zeros(g.dims, dtype=bool)
        anode[2:4, 5:7, 5:7] = True
        cathode = np.zeros(g.dims, dtype=bool)
        cathode[8:10, 5:7, 5:7] = True
        phi = solve_potential(sig, anode, cathode, 3000.0)
        assert phi.values.min() >= -1e-9 * 3000.0
        assert phi.values.max() <= 3000.0 * (1 + 1e-9)

    def test_overlapping_electrodes_rejected(self):
        g = GridSpec((8, 8, 8), (1, 1, 1))
        sig = ScalarField.full(g, 0.3, unit="S/m")
        m = np.zeros(g.dims, dtype=bool)
        m[3:5] = True
        with pytest.raises(SolverError):
            solve_potential(sig, m, m, 1000.0)

    def test_nonpositive_sigma_rejected(self):
        g = GridSpec((6, 6, 6), (1, 1, 1))
        sig = ScalarField(g, np.zeros(g.dims), unit="S/m")
        a = np.zeros(g.dims, dtype=bool)
        a[0] = True
        c = np.zeros(g.dims, dtype=bool)
        c[-1] = True
        with pytest.raises(ValueError):
            solve_potential(sig, a, c, 100.0)


class TestAccumulateField:
    def test_first_step_equals_field(self):
        g, sig, _, _, phi = plate_fixture(n=11)
        acc = FieldAccumulator.empty(g)
        acc = accumulate_field(acc, phi, sig)
        assert np.array_equal(acc.values, field_magnitude(phi).values)
        assert acc.steps == 1

    def test_step_order_irrelevant(self):
        g = GridSpec((13, 13, 13), (2, 2, 2))
        sig = ScalarField.full(g, 0.25, unit="S/m")
        probes = {
            "0": Probe((12.0, 12.0, 18.0), (0, 0, 1), "IRE-electrode"),
            "1": Probe((12.0, 12.0, 6.0), (0, 0, 1), "IRE-electrode"),
            "2": Probe((6.0, 12.0, 12.0), (1, 0, 0), "IRE-electrode"),
        }
        pairs = [ElectrodePair("0", "1", 1500.0, 8.0, 1.2),
                 ElectrodePair("1", "2", 1200.0, 8.0, 1.2)]
        phis = []
        for p in pairs:
            a, c = electrode_masks(g, probes, p)
            phis.append((solve_potential(sig, a, c, p.voltage), sig))
        fwd = FieldAccumulator.empty(g)
        for phi, s in phis:
            fwd = accumulate_field(fwd, phi, s)
        rev = FieldAccumulator.empty(g)
        for phi, s in reversed(phis):
            rev = accumulate_field(rev, phi, s)
        assert np.array_equal(fwd.values, rev.values)

    def test_accumulator_dominates_single_steps(self):
        g = GridSpec((13, 13, 13), (2, 2, 2))
        sig = ScalarField.full(g, 0.25, unit="S/m")
        probes = {
            "0": Probe((12.0, 12.0, 18.0), (0, 0, 1), "IRE-electrode"),
            "1": Probe((12.0, 12.0, 6.0), (0, 0, 1), "IRE-electrode"),
            "2": Probe((6.0, 12.0, 12.0), (1, 0, 0), "IRE-electrode"),
        }
        singles = []
        acc = FieldAccumulator.empty(g)
        for p in (ElectrodePair("0", "1", 1500.0, 8.0, 1.2),
                  ElectrodePair("2", "1", 1500.0, 8.0, 1.2)):
            a, c = electrode_masks(g, probes, p)
            phi = solve_potential(sig, a, c, p.voltage)
            singles.append(field_magnitude(phi).values)
            acc = accumulate_field(acc, phi, sig)
        for e in singles:
            assert np.all(acc.values >= e - 1e-12)


class TestIreLesion:
    def test_threshold_above_max_is_empty(self):
        g, sig, _, _, phi = plate_fixture(n=11)
        acc = accumulate_field(FieldAccumulator.empty(g), phi, sig)
        out = ire_lesion(acc, threshold=1e9)
        assert out.mask.voxel_count() == 0
        assert out.surface.is_empty

    def test_uniform_field_lesion_covers_interior(self):
        # 250 V/cm everywhere, threshold 200 V/cm -> whole interior inside
        g, sig, _, _, phi = plate_fixture(n=21, spacing=2.0)
        acc = accumulate_field(FieldAccumulator.empty(g), phi, sig)
        out = ire_lesion(acc, threshold=20_000.0)
        frac = out.mask.voxel_count() / g.n_voxels
        assert frac > 0.95

    def test_superlevel_nesting(self):
        g = GridSpec((15, 15, 15), (2, 2, 2))
        sig = ScalarField.full(g, 0.25, unit="S/m")
        probes = {
            "0": Probe((14.0, 14.0, 22.0), (0, 0, 1), "IRE-electrode"),
            "1": Probe((14.0, 14.0, 6.0), (0, 0, 1), "IRE-electrode"),
        }
        pair = ElectrodePair("0", "1", 2000.0, 8.0, 1.2)
        a, c = electrode_masks(g, probes, pair)
        phi = solve_potential(sig, a, c, pair.voltage)
        acc = accumulate_field(FieldAccumulator.empty(g), phi, sig)
        vols = []
        masks = []
        for thr in (20_000.0, 50_000.0, 90_000.0):
            out = ire_lesion(acc, thr)
            vols.append(out.volume_ml)
            masks.append(out.mask.binary())
        assert vols[0] >= vols[1] >= vols[2]
        assert np.all(masks[1] <= masks[0])
        assert np.all(masks[2] <= masks[1])


class TestImpedance:
    def test_parallel_plate_resistance(self):
        # Z = d / (sigma A) for the plate fixture, within 2 %
        n, spacing, sigma = 21, 2.0, 0.2
        g, sig, anode, cathode, phi = plate_fixture(n, spacing, sigma)
        z = impedance_proxy(phi, sig, anode, 1000.0)
        d = (n - 1) * spacing * 1e-3
        area = (n * spacing * 1e-3) ** 2
        expect = d / (sigma * area)
        assert abs(z - expect) / expect < 0.02

    def test_halving_sigma_doubles_impedance(self):
        g, sig1, anode, cathode, phi1 = plate_fixture(sigma=0.4)
        sig2 = ScalarField(g, sig1.values / 2.0, unit="S/m")
        phi2 = solve_potential(sig2, anode, cathode, 1000.0)
        z1 = impedance_proxy(phi1, sig1, anode, 1000.0)
        z2 = impedance_proxy(phi2, sig2, anode, 1000.0)
        assert z2 == pytest.approx(2.0 * z1, rel=1e-6)

    def test_two_enclosing_surfaces_agree(self):
        g = GridSpec((17, 17, 17), (2, 2, 2))
        rng = np.random.default_rng(11)
        sig = ScalarField(g, 0.2 + 0.2 * rng.random(g.dims), unit="S/m")
        anode = np.zeros(g.dims, dtype=bool)
        anode[7:10, 7:10, 7:10] = True
        cathode = np.zeros(g.dims, dtype=bool)
        cathode[0] = cathode[-1] = True
        phi = solve_potential(sig, anode, cathode, 1000.0)
        tight = anode
        loose = np.zeros(g.dims, dtype=bool)
        loose[5:12, 5:12, 5:12] = True
        z1 = impedance_proxy(phi, sig, tight, 1000.0)
        z2 = impedance_proxy(phi, sig, loose, 1000.0)
        assert abs(z1 - z2) / z1 < 0.01

    def test_anode_outflow_equals_cathode_inflow(self):
        g, sig, anode, cathode, phi = plate_fixture(n=15)
        z_a = impedance_proxy(phi, sig, anode, 1000.0)
        # current INTO the cathode = current out of its complement
        z_c = impedance_proxy(phi, sig, ~cathode, 1000.0)
        assert abs(z_a - z_c) / z_a < 0.01

    def test_degenerate_current_raises(self):
        g, sig, anode, cathode, phi = plate_fixture(n=9)
        # "enclosing" the whole domain -> no crossing faces -> no current
        with pytest.raises(SolverError):
            impedance_proxy(phi, sig, np.ones(g.dims, dtype=bool), 1000.0)


class TestElectrodePair:
    def test_validation(self):
        with pytest.raises(ValueError):
            ElectrodePair("0", "0", 1000.0)
        with pytest.raises(ValueError):
            ElectrodePair("0", "1", -5.0)
