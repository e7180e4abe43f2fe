"""Multi-tiered iterative phasing: slice, match, merge, phase.

Each outer iteration slices the current intensity model at a reference
orientation set, assigns every measured image its nearest slice, merges
the oriented images back into a 3D intensity by regularized least squares
(trilinear sampling operator and its exact adjoint, solved with conjugate
gradients), and runs phase retrieval; the next intensity estimate is the
squared Fourier magnitude of the retrieved density. Orientation
predictions and brightness factors from the learned model can be injected
to stabilize the loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import fftn

from .geometry import DetectorGeometry, QGrid, build_qgrid, sample_uniform_rotations
from .interp import trilinear_adjoint, trilinear_sample
from .metrics import aligned_density_resolution
from .phasing import PhasingConfig, retrieve_phase
from .simulate import DensityVolume, IntensityVolume, friedel_mate, pad_density


@dataclass
class MtipConfig:
    n_reference: int = 20000
    grid_m: int = 64
    q_spacing: float | None = None  # None: derive from qgrid so the corner fits
    lambda_reg: float = 1e-3
    cg_tol: float = 1e-8
    cg_maxiter: int = 80
    outer_iterations: int = 6
    mode: str = "pure"  # or "ml_assisted"
    match_on_log: bool = False
    seed: int = 0
    phasing: PhasingConfig = field(
        default_factory=lambda: PhasingConfig(n_blocks=8, hio_per_block=30, er_per_block=10, n_restarts=3)
    )

    def __post_init__(self):
        if self.n_reference < 1:
            raise ValueError("n_reference must be >= 1")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.mode not in ("pure", "ml_assisted"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class MtipTraceEntry:
    iteration: int
    phasing_residual: float
    resolution: float | None  # Angstrom, None when indeterminate
    resolution_voxels: float | None


@dataclass
class MtipResult:
    intensity: IntensityVolume
    density: DensityVolume
    assigned_rotations: np.ndarray
    trace: list[MtipTraceEntry]
    reference_rotations: np.ndarray


def slice_intensity(
    intensity: IntensityVolume, rotations: np.ndarray, qgrid: QGrid | np.ndarray
) -> np.ndarray:
    """Sample the model at every reference orientation; one flat image per
    rotation, identical to rendering the volume with unit flux."""
    coords = qgrid.flat if isinstance(qgrid, QGrid) else np.asarray(qgrid).reshape(-1, 3)
    out = np.empty((len(rotations), len(coords)))
    for k, rot in enumerate(rotations):
        vox = coords @ rot / intensity.q_spacing + intensity.center
        out[k], _ = trilinear_sample(intensity.grid, vox)
    return out


def match_orientations(
    images: np.ndarray,
    model_slices: np.ndarray,
    pixel_mask: np.ndarray | None = None,
    log_transform: bool = False,
) -> np.ndarray:
    """Index of the L2-nearest model slice for each image.

    Distances are computed over in-mask pixels, optionally on
    log1p-transformed values; ties resolve to the lowest index.
    """
    if len(model_slices) == 0:
        raise ValueError("empty reference slice set")
    images = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    slices = np.asarray(model_slices, dtype=np.float64).reshape(len(model_slices), -1)
    if images.shape[1] != slices.shape[1]:
        raise ValueError("image and slice pixel counts differ")
    if pixel_mask is not None:
        keep = np.asarray(pixel_mask, dtype=bool).reshape(-1)
        images = images[:, keep]
        slices = slices[:, keep]
    if log_transform:
        images = np.log1p(np.maximum(images, 0.0))
        slices = np.log1p(np.maximum(slices, 0.0))
    d2 = (
        (images**2).sum(axis=1)[:, None]
        - 2.0 * images @ slices.T
        + (slices**2).sum(axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def merge(
    images: np.ndarray,
    rotations: np.ndarray,
    qgrid: QGrid | np.ndarray,
    grid_m: int,
    q_spacing: float,
    lambda_reg: float = 0.0,
    pixel_mask: np.ndarray | None = None,
    cg_tol: float = 1e-8,
    cg_maxiter: int = 80,
) -> tuple[IntensityVolume, dict]:
    """Least-squares gridding of oriented slices onto an m^3 intensity.

    Solves (S^T S + lambda) A = S^T y by conjugate gradients, where S is
    the trilinear sampling operator taking the gridded volume to every
    (in-mask, in-range) slice pixel. The result is clipped at zero.

    Returns (volume, info) with info holding the CG residual, iteration
    count, and the per-voxel coverage mask (voxels touched by any sample).
    """
    if len(images) == 0:
        raise ValueError("merge requires at least one image")
    coords = qgrid.flat if isinstance(qgrid, QGrid) else np.asarray(qgrid).reshape(-1, 3)
    images = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    keep = (
        np.ones(coords.shape[0], dtype=bool)
        if pixel_mask is None
        else np.asarray(pixel_mask, dtype=bool).reshape(-1)
    )
    center = grid_m // 2
    pts_list, val_list = [], []
    for rot, img in zip(rotations, images):
        vox = coords[keep] @ rot / q_spacing + center
        pts_list.append(vox)
        val_list.append(img[keep])
    pts = np.concatenate(pts_list)
    vals = np.concatenate(val_list)
    _, valid = trilinear_sample(np.zeros((grid_m,) * 3), pts)
    pts, vals = pts[valid], vals[valid]

    shape = (grid_m,) * 3
    coverage = trilinear_adjoint(pts, np.ones(len(pts)), shape) > 0

    def normal_op(a_flat: np.ndarray) -> np.ndarray:
        sampled, _ = trilinear_sample(a_flat.reshape(shape), pts)
        back = trilinear_adjoint(pts, sampled, shape).reshape(-1)
        return back + lambda_reg * a_flat

    b = trilinear_adjoint(pts, vals, shape).reshape(-1)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    b_norm = float(np.linalg.norm(b))
    iters = 0
    if b_norm > 0:
        for iters in range(1, cg_maxiter + 1):
            ap = normal_op(p)
            alpha = rs / float(p @ ap)
            x += alpha * p
            r -= alpha * ap
            rs_new = float(r @ r)
            if np.sqrt(rs_new) <= cg_tol * b_norm:
                rs = rs_new
                break
            p = r + (rs_new / rs) * p
            rs = rs_new
    info = {
        "cg_iterations": iters,
        "cg_residual": float(np.sqrt(rs) / b_norm) if b_norm > 0 else 0.0,
        "coverage": coverage,
    }
    volume = IntensityVolume(grid=np.maximum(x.reshape(shape), 0.0), q_spacing=q_spacing)
    return volume, info


def inject_ml_priors(
    cfg: MtipConfig,
    predicted_rotations: np.ndarray | None,
    predicted_gammas: np.ndarray | None,
    images: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Build the ML-assisted reference set and rescale the images.

    The reference set combines n_reference//2 Haar-uniform rotations with
    up to n_reference//2 predicted ones (an empty prediction set falls
    back to a fully uniform reference). Images are divided by their
    predicted brightness factors.
    """
    images = np.asarray(images, dtype=np.float64)
    n_half = cfg.n_reference // 2
    if predicted_rotations is None or len(predicted_rotations) == 0:
        refs = sample_uniform_rotations(cfg.n_reference, cfg.seed)
    else:
        pred = np.asarray(predicted_rotations)[:n_half]
        uniform = sample_uniform_rotations(cfg.n_reference - len(pred), cfg.seed)
        refs = np.concatenate([uniform, pred])
    if predicted_gammas is not None:
        gammas = np.asarray(predicted_gammas, dtype=np.float64)
        if np.any(gammas <= 0):
            raise ValueError("predicted brightness factors must be positive")
        images = images / gammas.reshape(-1, *([1] * (images.ndim - 1)))
    return refs, images


def _random_symmetric_intensity(m: int, q_spacing: float, seed: int) -> IntensityVolume:
    rng = np.random.default_rng(seed)
    raw = rng.random((m, m, m))
    grid = 0.5 * (raw + friedel_mate(raw))
    return IntensityVolume(grid=grid, q_spacing=q_spacing)


def mtip_iterate(
    images: np.ndarray,
    cfg: MtipConfig,
    geom: DetectorGeometry,
    predicted_rotations: np.ndarray | None = None,
    predicted_gammas: np.ndarray | None = None,
    truth_density: DensityVolume | None = None,
    force_rotations: np.ndarray | None = None,
    pixel_mask: np.ndarray | None = None,
    initial_intensity: IntensityVolume | None = None,
) -> MtipResult:
    """Run the four-step loop for cfg.outer_iterations rounds.

    In ml_assisted mode the first round merges the images directly at
    their predicted orientations (the model prior replaces the otherwise
    arbitrary cold start); later rounds re-match against the evolving
    reference slices as usual. With force_rotations the matching step is
    bypassed entirely (evaluation only). When truth_density is given, a
    per-iteration resolution trace is recorded; indeterminate resolutions
    are recorded as failures, not raised.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or len(images) == 0:
        raise ValueError("images must be a non-empty (n, side, side) stack")
    if cfg.outer_iterations < 1:
        raise ValueError("outer_iterations must be >= 1")
    qgrid = build_qgrid(geom)
    if cfg.q_spacing is not None:
        q_spacing = cfg.q_spacing
    else:
        # Largest spacing that keeps the detector corner inside the grid.
        q_spacing = qgrid.q_max / (cfg.grid_m // 2 - 1)

    if cfg.mode == "ml_assisted":
        refs, images = inject_ml_priors(cfg, predicted_rotations, predicted_gammas, images)
    else:
        refs = sample_uniform_rotations(cfg.n_reference, cfg.seed)

    intensity = initial_intensity
    if intensity is None and cfg.mode == "pure":
        intensity = _random_symmetric_intensity(cfg.grid_m, q_spacing, cfg.seed)

    assigned = None
    density = None
    trace: list[MtipTraceEntry] = []
    for j in range(cfg.outer_iterations):
        if force_rotations is not None:
            assigned_rots = np.asarray(force_rotations)
        elif intensity is None and cfg.mode == "ml_assisted" and predicted_rotations is not None:
            assigned_rots = np.asarray(predicted_rotations)
        else:
            slices = slice_intensity(intensity, refs, qgrid)
            assigned = match_orientations(images, slices, pixel_mask, cfg.match_on_log)
            assigned_rots = refs[assigned]

        merged, info = merge(
            images,
            assigned_rots,
            qgrid,
            cfg.grid_m,
            q_spacing,
            cfg.lambda_reg,
            pixel_mask,
            cfg.cg_tol,
            cfg.cg_maxiter,
        )
        unknown = ~info["coverage"]
        phasing_cfg = PhasingConfig(**{**cfg.phasing.__dict__, "seed": cfg.seed * 1000 + j})
        density, residual = retrieve_phase(merged, phasing_cfg, unknown_mask=unknown)
        grid = np.abs(fftn(density.grid)) ** 2
        intensity = IntensityVolume(grid=np.fft.fftshift(grid), q_spacing=q_spacing)

        res_a = res_vox = None
        if truth_density is not None:
            truth = truth_density
            if truth.grid.shape != density.grid.shape:
                if abs(truth.voxel_size - density.voxel_size) > 1e-9 * truth.voxel_size:
                    raise ValueError(
                        "truth density voxel size does not match the reconstruction grid; "
                        "set cfg.q_spacing to 1/(grid_m * voxel_size)"
                    )
                truth = pad_density(truth, density.grid.shape[0])
            res_a = aligned_density_resolution(truth, density, threshold=0.5)
            if res_a is not None:
                res_vox = res_a / truth_density.voxel_size
        trace.append(
            MtipTraceEntry(
                iteration=j,
                phasing_residual=residual,
                resolution=res_a,
                resolution_voxels=res_vox,
            )
        )

    return MtipResult(
        intensity=intensity,
        density=density,
        assigned_rotations=assigned_rots,
        trace=trace,
        reference_rotations=refs,
    )
