"""Fourier shell correlation, threshold resolution, and volume alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import sample_uniform_rotations
from .interp import trilinear_sample
from .simulate import DensityVolume, IntensityVolume


@dataclass
class FscCurve:
    q: np.ndarray  # shell centers, 1/Angstrom, strictly increasing
    fsc: np.ndarray  # real part of the normalized shell correlation
    counts: np.ndarray  # voxels per shell
    delta_q: float

    def __post_init__(self):
        keep = self.counts >= 1
        self.q = np.asarray(self.q, dtype=np.float64)[keep]
        self.fsc = np.asarray(self.fsc, dtype=np.float64)[keep]
        self.counts = np.asarray(self.counts, dtype=np.int64)[keep]


def _q_magnitudes(n: int, spacing: float, centered: bool) -> np.ndarray:
    if centered:
        ax = (np.arange(n) - n // 2) * spacing
    else:
        ax = np.fft.fftfreq(n, d=1.0 / (n * spacing))
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.sqrt(x * x + y * y + z * z)


def _shell_correlate(f1: np.ndarray, f2: np.ndarray, qmag: np.ndarray, n_shells: int, delta_q: float) -> FscCurve:
    q_max = n_shells * delta_q
    flat_q = qmag.ravel()
    inside = flat_q <= q_max * (1 + 1e-12)
    bins = np.minimum(np.floor(flat_q / delta_q).astype(np.int64), n_shells - 1)[inside]
    a = f1.ravel()[inside]
    b = f2.ravel()[inside]
    cross = np.bincount(bins, weights=(a * np.conj(b)).real, minlength=n_shells)
    p1 = np.bincount(bins, weights=np.abs(a) ** 2, minlength=n_shells)
    p2 = np.bincount(bins, weights=np.abs(b) ** 2, minlength=n_shells)
    counts = np.bincount(bins, minlength=n_shells)
    denom = np.sqrt(p1 * p2)
    fsc = np.divide(cross, denom, out=np.zeros(n_shells), where=denom > 0)
    centers = (np.arange(n_shells) + 0.5) * delta_q
    return FscCurve(q=centers, fsc=fsc, counts=counts, delta_q=delta_q)


def fsc_density(rho1: DensityVolume, rho2: DensityVolume, n_shells: int | None = None) -> FscCurve:
    """Shell-wise normalized correlation of the two densities' Fourier
    transforms. The inputs must already be aligned (see align_density_volumes);
    the real part of the complex correlation is reported."""
    if rho1.grid.shape != rho2.grid.shape or rho1.voxel_size != rho2.voxel_size:
        raise ValueError("density grids must match in shape and voxel size")
    n = rho1.n
    n_shells = n_shells or n // 2
    f1 = np.fft.fftn(rho1.grid)
    f2 = np.fft.fftn(rho2.grid)
    qmag = _q_magnitudes(n, 1.0 / (n * rho1.voxel_size), centered=False)
    delta_q = (0.5 / rho1.voxel_size) / n_shells
    return _shell_correlate(f1, f2, qmag, n_shells, delta_q)


def fsc_intensity(i1: IntensityVolume, i2: IntensityVolume, n_shells: int | None = None) -> FscCurve:
    """FSC variant for non-negative intensities: correlate sqrt(I) in shells."""
    if i1.grid.shape != i2.grid.shape or i1.q_spacing != i2.q_spacing:
        raise ValueError("intensity grids must match in shape and spacing")
    m = i1.m
    n_shells = n_shells or m // 2
    qmag = _q_magnitudes(m, i1.q_spacing, centered=True)
    delta_q = (m // 2) * i1.q_spacing / n_shells
    return _shell_correlate(np.sqrt(i1.grid), np.sqrt(i2.grid), qmag, n_shells, delta_q)


def resolution_at(curve: FscCurve, threshold: float = 0.5) -> float | None:
    """Resolution in Angstrom at the first downward threshold crossing.

    Linear interpolation between shell centers locates the crossing. A
    curve that never drops below the threshold resolves to 1/q_last; a
    curve already below it at the first shell is indeterminate (None).
    """
    q, fsc = curve.q, curve.fsc
    if len(q) == 0 or fsc[0] < threshold:
        return None
    for k in range(1, len(q)):
        if fsc[k] < threshold:
            frac = (fsc[k - 1] - threshold) / (fsc[k - 1] - fsc[k])
            q_star = q[k - 1] + frac * (q[k] - q[k - 1])
            return 1.0 / q_star
    return 1.0 / q[-1]


def invert_volume(grid: np.ndarray) -> np.ndarray:
    """Point inversion through the origin voxel on the periodic grid."""
    return np.roll(np.flip(grid), 1, axis=(0, 1, 2))


def _best_circular_shift(ref: np.ndarray, mov: np.ndarray) -> tuple[tuple[int, int, int], float]:
    corr = np.fft.ifftn(np.conj(np.fft.fftn(mov)) * np.fft.fftn(ref)).real
    shift = np.unravel_index(int(np.argmax(corr)), corr.shape)
    return tuple(int(s) for s in shift), float(corr.max())


def _rotate_about_center(grid: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    n = grid.shape[0]
    c = (n - 1) / 2.0
    ax = np.arange(n) - c
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    # Sample the source at R^T r so the result is the grid rotated by R.
    src = pts @ rotation + c
    values, _ = trilinear_sample(grid, src)
    return values.reshape(grid.shape)


def align_density_volumes(
    ref: DensityVolume,
    mov: DensityVolume,
    rotation_search: int = 0,
    seed: int = 0,
) -> tuple[DensityVolume, dict]:
    """Align mov onto ref over the phase-retrieval gauge group.

    Tries both inversion states and every circular translation (via FFT
    cross-correlation); optionally also a coarse rotation grid of
    rotation_search Haar-uniform candidates (plus identity), locally
    refined, for reconstructions whose orientation frame is itself
    arbitrary. Size rotation_search so the grid's covering radius is
    below the object's angular feature scale (a few hundred candidates
    for blob-scale objects); phase-retrieval outputs only need the
    default translation/inversion search.

    Returns the aligned volume and a dict recording (flip, shift,
    rotation, score).
    """
    if ref.grid.shape != mov.grid.shape:
        raise ValueError("volume shapes must match")
    rotations = [np.eye(3)]
    if rotation_search > 0:
        rotations += list(sample_uniform_rotations(rotation_search, seed))
    scored = []  # (score, shift, flip, rotation index)
    for r_idx, rot in enumerate(rotations):
        base = mov.grid if r_idx == 0 else _rotate_about_center(mov.grid, rot)
        for flip in (False, True):
            cand = invert_volume(base) if flip else base
            shift, score = _best_circular_shift(ref.grid, cand)
            scored.append((score, shift, flip, r_idx))
    scored.sort(key=lambda t: -t[0])
    score, shift, flip, r_idx = scored[0]
    rotation = rotations[r_idx]

    if rotation_search > 0:
        # refine the top coarse candidates locally over the rotation vector;
        # the best-scoring coarse rotation is not always in the global basin
        from scipy.optimize import minimize

        from .geometry import rotvec_to_matrix

        def negative_score(delta: np.ndarray, base_rot: np.ndarray, flipped: bool) -> float:
            grid = _rotate_about_center(mov.grid, base_rot @ rotvec_to_matrix(delta))
            if flipped:
                grid = invert_volume(grid)
            return -_best_circular_shift(ref.grid, grid)[1]

        refine = list(scored[:3])
        for flip_state in (False, True):  # keep both inversion branches alive
            top = next((s for s in scored if s[2] == flip_state), None)
            if top is not None and top not in refine:
                refine.append(top)
        # simplex wide enough (~25 deg) to walk from a coarse grid point
        # into the true basin; scipy's default at x0=0 is microscopic
        simplex = np.vstack([np.zeros(3), 0.45 * np.eye(3)])
        for cand_score, _, cand_flip, cand_idx in refine:
            base_rot = rotations[cand_idx]
            res = minimize(
                negative_score,
                np.zeros(3),
                args=(base_rot, cand_flip),
                method="Nelder-Mead",
                options={
                    "xatol": 1e-5,
                    "fatol": 1e-12,
                    "maxiter": 300,
                    "initial_simplex": simplex,
                },
            )
            if -res.fun > score:
                rotation = base_rot @ rotvec_to_matrix(res.x)
                flip, r_idx = cand_flip, cand_idx
                grid = _rotate_about_center(mov.grid, rotation)
                cand = invert_volume(grid) if flip else grid
                shift, score = _best_circular_shift(ref.grid, cand)
        grid = _rotate_about_center(mov.grid, rotation) if not np.allclose(rotation, np.eye(3)) else mov.grid
        cand = invert_volume(grid) if flip else grid
    else:
        cand = invert_volume(mov.grid) if flip else mov.grid

    aligned = np.roll(cand, shift, axis=(0, 1, 2))
    info = {
        "flip": flip,
        "shift": tuple(shift),
        "rotation_index": r_idx,
        "rotation": rotation,
        "score": score,
    }
    return DensityVolume(grid=np.maximum(aligned, 0.0), voxel_size=ref.voxel_size), info


def aligned_density_resolution(
    truth: DensityVolume,
    recon: DensityVolume,
    threshold: float = 0.5,
    rotation_search: int = 0,
    seed: int = 0,
) -> float | None:
    """Align recon to truth, then read the FSC resolution at threshold."""
    aligned, _ = align_density_volumes(truth, recon, rotation_search=rotation_search, seed=seed)
    return resolution_at(fsc_density(truth, aligned), threshold)


def through_origin_r2(pred: np.ndarray, truth: np.ndarray) -> float:
    """Coefficient of determination for the no-intercept fit pred ~ c*truth.

    Uses the uncentered total sum of squares, the standard convention for
    regression through the origin.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    denom = float(truth @ truth)
    if denom == 0:
        raise ValueError("truth values are all zero")
    c = float(pred @ truth) / denom
    ss_res = float(np.sum((pred - c * truth) ** 2))
    ss_tot = float(pred @ pred)
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return 1.0 - ss_res / ss_tot
