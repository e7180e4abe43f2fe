"""Detector geometry, Ewald-sphere pixel mapping, and SO(3) utilities.

Momentum convention: |k| = 1/lambda in inverse Angstrom (no 2*pi factor),
so a feature at momentum q corresponds to a real-space length of 1/|q|.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

HC_KEV_ANGSTROM = 12.398419  # h*c in keV * Angstrom

SIX_D_EPS = 1e-8


class DegenerateRotationInput(ValueError):
    """6D rotation input with vanishing or (near-)parallel half-vectors."""


@dataclass(frozen=True)
class DetectorGeometry:
    """Square pixel-array detector centered on the beam axis.

    The beam travels along +z and pierces the detector at the fractional
    pixel ((n-1)/2, (n-1)/2). Image row index i increases downward while
    physical y increases upward; x increases with column index j.

    Parameters
    ----------
    n_side : int
        Pixels per detector side.
    pixel_size : float
        Pixel pitch in meters.
    distance : float
        Sample-to-detector distance in meters.
    photon_energy : float
        Beam photon energy in keV.
    """

    n_side: int
    pixel_size: float
    distance: float
    photon_energy: float

    def __post_init__(self):
        if self.n_side < 2:
            raise ValueError(f"n_side must be >= 2, got {self.n_side}")
        if self.pixel_size <= 0 or self.distance <= 0 or self.photon_energy <= 0:
            raise ValueError("pixel_size, distance and photon_energy must be positive")

    @property
    def wavelength(self) -> float:
        """X-ray wavelength in Angstrom."""
        return HC_KEV_ANGSTROM / self.photon_energy

    @property
    def center(self) -> float:
        """Beam-axis crossing in fractional pixel units (same for rows and columns)."""
        return (self.n_side - 1) / 2.0


def amo_instrument() -> DetectorGeometry:
    """AMO-style benchmark detector: 128 pixels spanning 0.1 m, 0.2 m from
    the sample, 4.6 keV photons."""
    return DetectorGeometry(n_side=128, pixel_size=0.1 / 128, distance=0.2, photon_energy=4.6)


@dataclass(frozen=True)
class QGrid:
    """Per-pixel reciprocal-space coordinates for the identity orientation.

    coords[i, j] is the scattering vector (k_out - k_in) in 1/Angstrom for
    pixel (i, j); every coordinate lies on the Ewald sphere of radius
    1/lambda centered at (0, 0, -1/lambda).
    """

    coords: np.ndarray  # (n, n, 3) float64
    wavelength: float

    @property
    def n_side(self) -> int:
        return self.coords.shape[0]

    @property
    def q_norms(self) -> np.ndarray:
        return np.linalg.norm(self.coords, axis=-1)

    @property
    def q_max(self) -> float:
        """Largest |q| on the grid (detector corner)."""
        return float(self.q_norms.max())

    @property
    def flat(self) -> np.ndarray:
        return self.coords.reshape(-1, 3)


def pixel_to_q(geom: DetectorGeometry, i: float, j: float) -> np.ndarray:
    """Map a detector pixel to its scattering vector in 1/Angstrom.

    Elastic scattering: q = k_out - k_in with |k| = 1/lambda, which places
    q on the Ewald sphere; |q| = 2 sin(theta/2)/lambda with
    tan(theta) = r/distance for detector radius r.
    """
    if not (0 <= i < geom.n_side and 0 <= j < geom.n_side):
        raise IndexError(f"pixel ({i}, {j}) outside {geom.n_side}x{geom.n_side} detector")
    c = geom.center
    x = (j - c) * geom.pixel_size
    y = (c - i) * geom.pixel_size
    norm = math.sqrt(x * x + y * y + geom.distance * geom.distance)
    lam = geom.wavelength
    return np.array([x / norm / lam, y / norm / lam, (geom.distance / norm - 1.0) / lam])


def build_qgrid(geom: DetectorGeometry) -> QGrid:
    """Vectorized pixel_to_q over the whole detector."""
    c = geom.center
    idx = np.arange(geom.n_side, dtype=np.float64)
    x = (idx[None, :] - c) * geom.pixel_size
    y = (c - idx[:, None]) * geom.pixel_size
    xg, yg = np.broadcast_arrays(x, y)
    norm = np.sqrt(xg**2 + yg**2 + geom.distance**2)
    lam = geom.wavelength
    coords = np.stack(
        [xg / norm / lam, yg / norm / lam, (geom.distance / norm - 1.0) / lam], axis=-1
    )
    return QGrid(coords=coords, wavelength=lam)


def six_d_to_rotation(v: np.ndarray) -> np.ndarray:
    """Gram-Schmidt map from a 6-vector to a rotation matrix.

    The first three components fix row 1, the remaining three are
    orthogonalized against it to give row 2, and row 3 completes the
    right-handed frame. Invariant under positive rescaling of either
    half-vector.
    """
    v = np.asarray(v, dtype=np.float64).reshape(6)
    a, b = v[:3], v[3:]
    na = np.linalg.norm(a)
    if na <= SIX_D_EPS:
        raise DegenerateRotationInput(f"first half-vector has norm {na:.3e}")
    r1 = a / na
    b_perp = b - (r1 @ b) * r1
    nb = np.linalg.norm(b_perp)
    if nb <= SIX_D_EPS:
        raise DegenerateRotationInput(
            f"second half-vector is (near-)parallel to the first (residual {nb:.3e})"
        )
    r2 = b_perp / nb
    r3 = np.cross(r1, r2)
    return np.stack([r1, r2, r3])


def is_rotation(m: np.ndarray, tol: float = 1e-9) -> bool:
    """Check orthonormality and det +1 within tol."""
    m = np.asarray(m)
    if m.shape != (3, 3):
        return False
    return (
        np.max(np.abs(m.T @ m - np.eye(3))) < tol
        and abs(np.linalg.det(m) - 1.0) < tol
    )


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (w, x, y, z) to rotation matrix/matrices."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((len(q), 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m[0] if single else m


def axis_angle_to_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues formula."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        return np.eye(3)
    axis = axis / n
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def rotvec_to_matrix(rotvec: np.ndarray) -> np.ndarray:
    """Rotation-vector exponential map (axis * angle)."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    angle = np.linalg.norm(rotvec)
    if angle == 0:
        return np.eye(3)
    return axis_angle_to_matrix(rotvec / angle, angle)


def sample_uniform_rotations(n: int, seed: int) -> np.ndarray:
    """Draw n Haar-uniform rotations as an (n, 3, 3) batch.

    Uses uniform quaternions on S^3 (Shoemake's subgroup algorithm);
    deterministic for a fixed seed.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    u1, u2, u3 = rng.random((3, n))
    s1, s2 = np.sqrt(1 - u1), np.sqrt(u1)
    a2, a3 = 2 * np.pi * u2, 2 * np.pi * u3
    quat = np.stack([s1 * np.sin(a2), s1 * np.cos(a2), s2 * np.sin(a3), s2 * np.cos(a3)], axis=1)
    return quaternion_to_matrix(quat)


def rotation_angles(m: np.ndarray) -> np.ndarray:
    """Geodesic rotation angle(s) in radians of matrix/batch m."""
    m = np.asarray(m)
    tr = np.trace(m) if m.ndim == 2 else np.einsum("nii->n", m)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def geodesic_errors(pred: np.ndarray, truth: np.ndarray, gauge: np.ndarray | None = None) -> np.ndarray:
    """Per-pair geodesic distances d(pred[i] @ gauge, truth[i]) in radians.

    Computed as 2*arcsin(|R1 - R2|_F / (2*sqrt(2))), which is exact on
    SO(3) and, unlike the arccos-of-trace form, keeps full precision for
    small angles.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    moved = pred if gauge is None else pred @ np.asarray(gauge)
    fro = np.linalg.norm((moved - truth).reshape(len(pred), 9), axis=1)
    return 2.0 * np.arcsin(np.clip(fro / (2.0 * math.sqrt(2.0)), 0.0, 1.0))


def project_to_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def align_rotation_sets(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, float]:
    """Find the global gauge rotation g minimizing the mean geodesic
    distance between pred[i] @ g and truth[i].

    A self-consistent orientation solution is only defined up to a global
    rotation, so error metrics must be evaluated after this alignment.
    Candidates (identity, the chordal mean of the per-pair relative
    rotations, and a robust inlier re-estimate) are refined by a local
    derivative-free search; the returned error never exceeds the
    unaligned one.

    Returns
    -------
    (g, mean_error) : the gauge rotation and the aligned mean geodesic
    error in radians.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim != 3 or pred.shape != truth.shape or pred.shape[1:] != (3, 3):
        raise ValueError(f"expected matching (n, 3, 3) batches, got {pred.shape} vs {truth.shape}")
    if len(pred) == 0:
        raise ValueError("empty rotation batches")

    rel = np.einsum("nji,njk->nik", pred, truth)

    def mean_error(g: np.ndarray) -> float:
        return float(np.mean(geodesic_errors(pred, truth, g)))

    candidates = [np.eye(3), project_to_rotation(rel.mean(axis=0))]
    # Re-estimate from the better half of the pairs; robust when a
    # minority of predictions sits on a flipped branch.
    errs = geodesic_errors(pred, truth, candidates[1])
    inliers = errs <= np.median(errs)
    if inliers.any():
        candidates.append(project_to_rotation(rel[inliers].mean(axis=0)))

    best = min(candidates, key=mean_error)
    res = minimize(
        lambda d: mean_error(best @ rotvec_to_matrix(d)),
        np.zeros(3),
        method="Nelder-Mead",
        options={"xatol": 1e-9, "fatol": 1e-13, "maxiter": 400},
    )
    refined = project_to_rotation(best @ rotvec_to_matrix(res.x))
    if mean_error(refined) < mean_error(best):
        best = refined
    return best, mean_error(best)
