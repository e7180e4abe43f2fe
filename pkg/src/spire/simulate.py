"""Forward diffraction model: densities or atoms -> 3D intensity -> detector images."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .geometry import DetectorGeometry, QGrid, build_qgrid, sample_uniform_rotations
from .interp import trilinear_sample

# Scalar (q-independent) form factors: electrons per element.
ELECTRON_COUNTS = {"H": 1, "C": 6, "N": 7, "O": 8, "P": 15, "S": 16}


class PdbParseError(ValueError):
    """Malformed fixed-column record; carries the 1-based line number."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class UnsupportedElementError(PdbParseError):
    pass


@dataclass
class AtomList:
    """Point scatterers: element symbols, Angstrom coordinates, electron counts."""

    elements: list[str]
    coords: np.ndarray  # (n, 3) float64, Angstrom
    electrons: np.ndarray  # (n,) float64

    def __len__(self) -> int:
        return len(self.elements)


@dataclass
class DensityVolume:
    """Real-space electron density on a cubic grid (electrons per voxel)."""

    grid: np.ndarray  # (n, n, n) float64, >= 0
    voxel_size: float  # Angstrom

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        n = self.grid.shape[0]
        if self.grid.shape != (n, n, n) or n < 4:
            raise ValueError(f"density grid must be cubic with side >= 4, got {self.grid.shape}")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.grid.min() < 0:
            raise ValueError("density values must be non-negative")

    @property
    def n(self) -> int:
        return self.grid.shape[0]


@dataclass
class IntensityVolume:
    """Reciprocal-space intensity on a cubic grid, zero-frequency at the
    center voxel (index m//2 on each axis)."""

    grid: np.ndarray  # (m, m, m) float64, >= 0
    q_spacing: float  # 1/Angstrom per voxel

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        m = self.grid.shape[0]
        if self.grid.shape != (m, m, m):
            raise ValueError(f"intensity grid must be cubic, got {self.grid.shape}")
        if self.q_spacing <= 0:
            raise ValueError("q_spacing must be positive")
        if self.grid.min() < 0:
            raise ValueError("intensity values must be non-negative")

    @property
    def m(self) -> int:
        return self.grid.shape[0]

    @property
    def center(self) -> int:
        return self.grid.shape[0] // 2


@dataclass
class DiffractionImage:
    """Detector image of expected or sampled photon counts."""

    pixels: np.ndarray  # (n_side, n_side) float64, >= 0
    meta: dict = field(default_factory=dict)


@dataclass
class SimulatedDataset:
    """Noiseless rendered patterns plus the ground-truth orientations
    (kept for evaluation only)."""

    images: np.ndarray  # (n_images, n_side, n_side)
    rotations: np.ndarray  # (n_images, 3, 3)
    geometry: DetectorGeometry
    outside_counts: np.ndarray  # per image: pixels that fell outside the volume
    seed: int


def parse_pdb_atoms(text: str) -> AtomList:
    """Parse ATOM/HETATM records from fixed-column PDB-format text.

    Coordinates come from columns 31-54, the element symbol from columns
    77-78; all other record types are ignored.
    """
    elements: list[str] = []
    coords: list[tuple[float, float, float]] = []
    electrons: list[float] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.startswith(("ATOM", "HETATM")):
            continue
        if len(line) < 54:
            raise PdbParseError("record too short for coordinate fields", lineno)
        try:
            xyz = tuple(float(line[k : k + 8]) for k in (30, 38, 46))
        except ValueError as exc:
            raise PdbParseError(f"bad coordinate field ({exc})", lineno) from None
        if not all(np.isfinite(xyz)):
            raise PdbParseError("non-finite coordinate", lineno)
        element = line[76:78].strip().upper() if len(line) >= 78 else ""
        if element not in ELECTRON_COUNTS:
            raise UnsupportedElementError(f"unsupported element {element!r}", lineno)
        elements.append(element)
        coords.append(xyz)
        electrons.append(float(ELECTRON_COUNTS[element]))
    return AtomList(
        elements=elements,
        coords=np.asarray(coords, dtype=np.float64).reshape(-1, 3),
        electrons=np.asarray(electrons, dtype=np.float64),
    )


def atoms_to_density(
    atoms: AtomList, n: int, voxel_size: float, blur_sigma: float
) -> DensityVolume:
    """Gaussian-splat point scatterers onto an n^3 grid.

    Atoms are recentered on their electron-weighted center of mass; each
    contributes its electron count spread over a sigma=blur_sigma (Angstrom)
    Gaussian, integrated per voxel along each axis so the grid total equals
    the electron total up to the truncated tails.
    """
    if len(atoms) == 0:
        return DensityVolume(grid=np.zeros((n, n, n)), voxel_size=voxel_size)
    com = np.average(atoms.coords, axis=0, weights=atoms.electrons)
    centered = atoms.coords - com
    half = (n - 1) / 2.0
    pos_vox = centered / voxel_size + half  # voxel coordinates of atom centers
    out_of_box = np.any((pos_vox < 0) | (pos_vox > n - 1), axis=1)
    if out_of_box.any():
        bad = int(np.nonzero(out_of_box)[0][0])
        raise ValueError(
            f"atom {bad} at {atoms.coords[bad]} falls outside the {n}^3 box after centering"
        )

    sigma_vox = blur_sigma / voxel_size
    reach = max(1, int(np.ceil(4.0 * sigma_vox)))
    grid = np.zeros((n, n, n))
    edges = np.arange(n + 1) - 0.5  # voxel boundaries in voxel units
    inv = 1.0 / (sigma_vox * np.sqrt(2.0))
    for p, ne in zip(pos_vox, atoms.electrons):
        w_axes = []
        sl_axes = []
        for ax in range(3):
            lo = max(0, int(np.floor(p[ax])) - reach)
            hi = min(n, int(np.ceil(p[ax])) + reach + 1)
            cdf = erf((edges[lo : hi + 1] - p[ax]) * inv)
            w_axes.append(0.5 * (cdf[1:] - cdf[:-1]))
            sl_axes.append(slice(lo, hi))
        grid[sl_axes[0], sl_axes[1], sl_axes[2]] += ne * (
            w_axes[0][:, None, None] * w_axes[1][None, :, None] * w_axes[2][None, None, :]
        )
    return DensityVolume(grid=grid, voxel_size=voxel_size)


def make_blob_phantom(
    n: int,
    voxel_size: float,
    n_blobs: int = 6,
    seed: int = 0,
    center_spread: float = 0.18,
    sigma_range: tuple[float, float] = (1.2, 2.2),
) -> DensityVolume:
    """Random multi-Gaussian phantom, compact enough to stay 2x oversampled.

    Blob centers live within center_spread*n voxels of the grid center and
    widths (in voxels) span sigma_range; with the defaults the 4-sigma
    reach stays inside a ball of radius n/2 voxels, so the padded
    intensity is genuinely 2x oversampled.
    """
    rng = np.random.default_rng(seed)
    half = (n - 1) / 2.0
    ax = np.arange(n) - half
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    grid = np.zeros((n, n, n))
    for _ in range(n_blobs):
        c = rng.uniform(-center_spread * n, center_spread * n, size=3)
        sig = rng.uniform(*sigma_range)
        amp = rng.uniform(0.5, 2.0)
        r2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
        grid += amp * np.exp(-0.5 * r2 / sig**2)
    return DensityVolume(grid=grid, voxel_size=voxel_size)


def pad_density(rho: DensityVolume, m: int) -> DensityVolume:
    """Embed the density at the center of a larger m^3 grid (same voxels)."""
    n = rho.n
    if m < n:
        raise ValueError(f"target side {m} smaller than source {n}")
    grid = np.zeros((m, m, m))
    start = (m - n) // 2
    grid[start : start + n, start : start + n, start : start + n] = rho.grid
    return DensityVolume(grid=grid, voxel_size=rho.voxel_size)


def density_to_intensity(rho: DensityVolume, oversample: int = 2) -> IntensityVolume:
    """Squared Fourier magnitude of the density on a zero-padded grid.

    The output side is oversample*n and the zero-frequency voxel sits at
    the grid center; Friedel symmetry I(q) = I(-q) holds exactly because
    the density is real.
    """
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    m = oversample * rho.n
    f = np.fft.fftn(rho.grid, s=(m, m, m), axes=(0, 1, 2))
    intensity = np.fft.fftshift(np.abs(f) ** 2)
    return IntensityVolume(grid=intensity, q_spacing=1.0 / (m * rho.voxel_size))


def friedel_mate(grid: np.ndarray) -> np.ndarray:
    """Index-reflected copy pairing q with -q on a center-shifted grid."""
    return np.roll(np.flip(grid), 1, axis=(0, 1, 2))


def render_pattern(
    intensity: IntensityVolume,
    rotation: np.ndarray,
    qgrid: QGrid,
    flux_scale: float = 1.0,
) -> DiffractionImage:
    """Sample the intensity volume on the rotated Ewald slice.

    Pixel p maps to R^T q_p; values are trilinearly interpolated and scaled
    by flux_scale. Pixels falling outside the volume are set to 0 and
    counted in meta["n_outside"].
    """
    n = qgrid.n_side
    pts_q = qgrid.flat @ np.asarray(rotation, dtype=np.float64)  # rows are (R^T q)^T
    vox = pts_q / intensity.q_spacing + intensity.center
    values, valid = trilinear_sample(intensity.grid, vox)
    pixels = (values * flux_scale).reshape(n, n)
    return DiffractionImage(
        pixels=pixels, meta={"n_outside": int((~valid).sum())}
    )


def simulate_dataset(
    rho: DensityVolume,
    geom: DetectorGeometry,
    n_images: int,
    flux_scale: float = 1.0,
    seed: int = 42,
    oversample: int = 2,
) -> SimulatedDataset:
    """Render n_images noiseless patterns at Haar-uniform orientations."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    intensity = density_to_intensity(rho, oversample=oversample)
    rotations = sample_uniform_rotations(n_images, seed)
    qgrid = build_qgrid(geom)
    images = np.empty((n_images, geom.n_side, geom.n_side))
    outside = np.empty(n_images, dtype=np.int64)
    for k in range(n_images):
        img = render_pattern(intensity, rotations[k], qgrid, flux_scale)
        images[k] = img.pixels
        outside[k] = img.meta["n_outside"]
    return SimulatedDataset(
        images=images,
        rotations=rotations,
        geometry=geom,
        outside_counts=outside,
        seed=seed,
    )
