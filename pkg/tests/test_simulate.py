import numpy as np
import pytest

from spire.geometry import DetectorGeometry, axis_angle_to_matrix, build_qgrid
from spire.interp import trilinear_adjoint, trilinear_sample
from spire.simulate import (
    AtomList,
    DensityVolume,
    IntensityVolume,
    PdbParseError,
    UnsupportedElementError,
    atoms_to_density,
    density_to_intensity,
    friedel_mate,
    make_blob_phantom,
    pad_density,
    parse_pdb_atoms,
    render_pattern,
    simulate_dataset,
)

ATOM_LINE = "ATOM      1  N   MET A   1      11.104   6.134  -6.504  1.00  0.00           N"


def dft_intensity_oracle(grid, m):
    """Brute-force discrete Fourier sum |sum rho(r) exp(-2pi i k.r/m)|^2,
    built from explicit per-axis phase matrices (no FFT)."""
    n = grid.shape[0]
    k = np.arange(m)
    r = np.arange(n)
    phase = np.exp(-2j * np.pi * np.outer(k, r) / m)  # (m, n)
    f = np.einsum("ax,by,cz,xyz->abc", phase, phase, phase, grid.astype(complex))
    return np.fft.fftshift(np.abs(f) ** 2)


def trilinear_scalar_oracle(grid, p):
    """Straightforward scalar trilinear interpolation."""
    m = grid.shape[0]
    if any(c < 0 or c > m - 1 for c in p):
        return 0.0
    i0 = [min(int(np.floor(c)), m - 2) for c in p]
    f = [c - i for c, i in zip(p, i0)]
    total = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (
                    (f[0] if dx else 1 - f[0])
                    * (f[1] if dy else 1 - f[1])
                    * (f[2] if dz else 1 - f[2])
                )
                total += w * grid[i0[0] + dx, i0[1] + dy, i0[2] + dz]
    return total


class TestParsePdb:
    def test_empty(self):
        atoms = parse_pdb_atoms("")
        assert len(atoms) == 0

    def test_single_atom_line(self):
        atoms = parse_pdb_atoms(ATOM_LINE)
        assert len(atoms) == 1
        assert atoms.elements == ["N"]
        assert np.allclose(atoms.coords[0], [11.104, 6.134, -6.504])
        assert atoms.electrons[0] == 7

    def test_ignores_other_records(self):
        text = "HEADER    TEST\nREMARK hello\n" + ATOM_LINE + "\nTER\nEND\n"
        assert len(parse_pdb_atoms(text)) == 1

    def test_hetatm(self):
        line = "HETATM" + ATOM_LINE[6:]
        assert len(parse_pdb_atoms(line)) == 1

    def test_malformed_coordinate_names_line(self):
        lines = [ATOM_LINE] * 10
        bad = ATOM_LINE[:30] + "  xx.bad" + ATOM_LINE[38:]
        lines[6] = bad
        with pytest.raises(PdbParseError) as exc:
            parse_pdb_atoms("\n".join(lines))
        assert exc.value.line_number == 7
        assert "line 7" in str(exc.value)

    def test_unknown_element(self):
        line = ATOM_LINE[:76] + "XE"
        with pytest.raises(UnsupportedElementError):
            parse_pdb_atoms(line)

    def test_electron_lookup(self):
        for sym, z in (("H", 1), ("C", 6), ("O", 8), ("P", 15), ("S", 16)):
            line = ATOM_LINE[:76] + f"{sym:>2}"
            assert parse_pdb_atoms(line).electrons[0] == z


class TestAtomsToDensity:
    def test_single_atom_mass(self):
        atoms = AtomList(["O"], np.array([[1.0, 2.0, 3.0]]), np.array([8.0]))
        rho = atoms_to_density(atoms, 24, 1.0, blur_sigma=1.2)
        assert rho.grid.sum() == pytest.approx(8.0, rel=0.01)

    def test_mirrored_pair_symmetry(self):
        atoms = AtomList(
            ["C", "C"], np.array([[3.0, 1.0, -2.0], [-3.0, -1.0, 2.0]]), np.array([6.0, 6.0])
        )
        rho = atoms_to_density(atoms, 25, 1.0, blur_sigma=1.0)
        flipped = rho.grid[::-1, ::-1, ::-1]
        assert np.max(np.abs(rho.grid - flipped)) < 1e-9

    def test_hundred_random_atoms_mass(self, rng):
        n = 100
        coords = rng.uniform(-8, 8, size=(n, 3))
        atoms = AtomList(["C"] * n, coords, np.full(n, 6.0))
        rho = atoms_to_density(atoms, 32, 1.0, blur_sigma=1.0)
        assert rho.grid.sum() == pytest.approx(600.0, rel=0.01)

    def test_atom_outside_box(self):
        atoms = AtomList(
            ["C", "C"], np.array([[0.0, 0.0, 0.0], [40.0, 0.0, 0.0]]), np.array([6.0, 6.0])
        )
        with pytest.raises(ValueError, match="outside"):
            atoms_to_density(atoms, 16, 1.0, blur_sigma=1.0)


class TestDensityToIntensity:
    def test_central_delta_constant(self):
        grid = np.zeros((8, 8, 8))
        grid[4, 4, 4] = 3.0
        vol = density_to_intensity(DensityVolume(grid=grid, voxel_size=1.0), oversample=2)
        assert np.allclose(vol.grid, 9.0, rtol=1e-12)

    def test_dc_value(self):
        rho = make_blob_phantom(16, 1.0, seed=2)
        vol = density_to_intensity(rho, oversample=2)
        c = vol.center
        assert vol.grid[c, c, c] == pytest.approx(rho.grid.sum() ** 2, rel=1e-12)

    def test_translation_invariance(self, rng):
        # compactly supported object: integer-voxel shifts never wrap mass
        grid = np.zeros((16, 16, 16))
        grid[5:10, 5:10, 5:10] = rng.random((5, 5, 5))
        shifted = np.roll(grid, (2, -3, 1), axis=(0, 1, 2))
        a = density_to_intensity(DensityVolume(grid, 1.0), oversample=2).grid
        b = density_to_intensity(DensityVolume(shifted, 1.0), oversample=2).grid
        assert np.max(np.abs(a - b)) / a.max() < 1e-9

    def test_friedel_symmetry_exact_pairing(self):
        vol = density_to_intensity(make_blob_phantom(12, 1.0, seed=4), oversample=2)
        rel = np.max(np.abs(vol.grid - friedel_mate(vol.grid))) / vol.grid.max()
        assert rel < 1e-9

    def test_matches_bruteforce_dft(self, rng):
        grid = rng.random((16, 16, 16))
        vol = density_to_intensity(DensityVolume(grid, 1.0), oversample=1)
        oracle = dft_intensity_oracle(grid, 16)
        assert np.max(np.abs(vol.grid - oracle)) / oracle.max() < 1e-9

    def test_matches_bruteforce_dft_oversampled(self, rng):
        grid = rng.random((8, 8, 8))
        vol = density_to_intensity(DensityVolume(grid, 1.0), oversample=2)
        oracle = dft_intensity_oracle(grid, 16)
        assert np.max(np.abs(vol.grid - oracle)) / oracle.max() < 1e-9

    def test_parseval(self):
        rho = make_blob_phantom(16, 1.0, seed=5)
        vol = density_to_intensity(rho, oversample=2)
        m = vol.m
        assert vol.grid.sum() == pytest.approx(m**3 * np.sum(rho.grid**2), rel=1e-6)

    def test_q_spacing(self):
        rho = make_blob_phantom(16, 2.0, seed=6)
        vol = density_to_intensity(rho, oversample=2)
        assert vol.q_spacing == pytest.approx(1.0 / (32 * 2.0))


class TestRenderPattern:
    def test_constant_volume(self, toy_geom):
        qgrid = build_qgrid(toy_geom)
        m = 24
        q_spacing = qgrid.q_max / (m // 2 - 2)
        vol = IntensityVolume(grid=np.full((m, m, m), 7.0), q_spacing=q_spacing)
        rot = axis_angle_to_matrix([1, 1, 0], 0.4)
        img = render_pattern(vol, rot, qgrid, flux_scale=2.0)
        assert img.meta["n_outside"] == 0
        assert np.allclose(img.pixels, 14.0, rtol=1e-12)

    @staticmethod
    def _spherical_volume(qgrid, m, sigma_vox):
        q_spacing = qgrid.q_max / (m // 2 - 2)
        ax = (np.arange(m) - m // 2) * q_spacing
        x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
        r2 = x**2 + y**2 + z**2
        grid = np.exp(-r2 / (2 * (sigma_vox * q_spacing) ** 2))
        return IntensityVolume(grid=grid, q_spacing=q_spacing), q_spacing

    def test_isotropic_volume_grid_symmetry_exact(self, toy_geom):
        # rotations in the cubic point group permute voxels, so trilinear
        # sampling commutes with them exactly
        qgrid = build_qgrid(toy_geom)
        vol, _ = self._spherical_volume(qgrid, 32, sigma_vox=4.0)
        a = render_pattern(vol, np.eye(3), qgrid).pixels
        b = render_pattern(vol, axis_angle_to_matrix([0, 0, 1], np.pi / 2), qgrid).pixels
        assert np.max(np.abs(a - b)) < 1e-12

    def test_isotropic_volume_arbitrary_rotation(self, toy_geom):
        # for arbitrary rotations the residual is pure interpolation error,
        # bounded by (3/8) h^2 max|f''| for a separable trilinear scheme
        qgrid = build_qgrid(toy_geom)
        sigma_vox = 4.0
        vol, q_spacing = self._spherical_volume(qgrid, 32, sigma_vox)
        a = render_pattern(vol, np.eye(3), qgrid).pixels
        b = render_pattern(vol, axis_angle_to_matrix([1, 2, 3], 1.1), qgrid).pixels
        bound = 2 * (3 / 8) / sigma_vox**2  # h = q_spacing, max|f''| <= peak/sigma^2
        assert np.max(np.abs(a - b)) < bound
        assert np.max(np.abs(a - b)) < 0.01 * a.max()

    def test_matches_per_pixel_oracle(self, rng):
        geom = DetectorGeometry(n_side=8, pixel_size=0.02, distance=0.1, photon_energy=2.0)
        qgrid = build_qgrid(geom)
        m = 16
        q_spacing = qgrid.q_max / (m // 2 - 2)
        grid = rng.random((m, m, m))
        vol = IntensityVolume(grid=grid, q_spacing=q_spacing)
        rot = axis_angle_to_matrix([0.3, -1.0, 0.7], 0.9)
        img = render_pattern(vol, rot, qgrid, flux_scale=1.5)
        for i in range(8):
            for j in range(8):
                p = rot.T @ qgrid.coords[i, j] / q_spacing + m // 2
                assert img.pixels[i, j] == pytest.approx(
                    1.5 * trilinear_scalar_oracle(grid, p), abs=1e-12
                )

    def test_linearity(self, toy_geom, rng):
        qgrid = build_qgrid(toy_geom)
        m = 20
        q_spacing = qgrid.q_max / (m // 2 - 2)
        g1, g2 = rng.random((2, m, m, m))
        rot = axis_angle_to_matrix([1, 0, 2], 0.5)
        v = lambda g: IntensityVolume(grid=g, q_spacing=q_spacing)
        combo = render_pattern(v(2.0 * g1 + 3.0 * g2), rot, qgrid).pixels
        parts = 2.0 * render_pattern(v(g1), rot, qgrid).pixels + 3.0 * render_pattern(
            v(g2), rot, qgrid
        ).pixels
        assert np.max(np.abs(combo - parts)) < 1e-9 * parts.max()

    def test_out_of_range_flagged(self, toy_geom):
        qgrid = build_qgrid(toy_geom)
        vol = IntensityVolume(grid=np.ones((8, 8, 8)), q_spacing=qgrid.q_max / 16)
        img = render_pattern(vol, np.eye(3), qgrid)
        assert img.meta["n_outside"] > 0
        assert img.pixels.min() == 0.0


class TestTrilinearAdjoint:
    def test_dot_product_identity(self, rng):
        shape = (12, 12, 12)
        grid = rng.random(shape)
        pts = rng.uniform(-1, 12, size=(500, 3))  # includes out-of-range points
        y = rng.random(500)
        sampled, _ = trilinear_sample(grid, pts)
        back = trilinear_adjoint(pts, y, shape)
        assert float(sampled @ y) == pytest.approx(float((grid * back).sum()), rel=1e-12)


class TestSimulateDataset:
    def test_single_image(self, toy_geom):
        rho = make_blob_phantom(12, 2.0, seed=1)
        ds = simulate_dataset(rho, toy_geom, n_images=1, seed=3)
        assert ds.images.shape == (1, 16, 16)
        assert ds.rotations.shape == (1, 3, 3)

    def test_deterministic(self, toy_geom):
        rho = make_blob_phantom(12, 2.0, seed=1)
        a = simulate_dataset(rho, toy_geom, n_images=5, seed=42)
        b = simulate_dataset(rho, toy_geom, n_images=5, seed=42)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.rotations, b.rotations)

    def test_near_spherical_photon_sum_stable(self):
        # spherically symmetric phantom: total scattered signal should not
        # depend on orientation
        n = 24
        ax = np.arange(n) - (n - 1) / 2
        x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
        blob = np.exp(-(x**2 + y**2 + z**2) / (2 * 3.0**2))
        rho = DensityVolume(grid=blob, voxel_size=2.0)
        geom = DetectorGeometry(n_side=24, pixel_size=0.004, distance=0.08, photon_energy=3.0)
        ds = simulate_dataset(rho, geom, n_images=50, seed=11)
        totals = ds.images.sum(axis=(1, 2))
        assert totals.std() / totals.mean() < 0.05


class TestPadDensity:
    def test_centered_embedding(self):
        rho = make_blob_phantom(8, 1.5, seed=9)
        padded = pad_density(rho, 16)
        assert padded.grid.shape == (16, 16, 16)
        assert np.array_equal(padded.grid[4:12, 4:12, 4:12], rho.grid)
        assert padded.grid.sum() == pytest.approx(rho.grid.sum())
