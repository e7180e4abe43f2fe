"""Trilinear sampling on regular 3D grids and its exact adjoint.

Both directions share the same corner weights, so <S a, y> == <a, S^T y>
holds to floating-point accuracy; the adjoint is the gridding operator
used by the tomographic merge.
"""

from __future__ import annotations

import numpy as np


def _corner_indices_weights(pts: np.ndarray, shape: tuple[int, int, int]):
    """Corner flat-indices and weights for points given in voxel units.

    Points outside [0, m-1] in any axis are flagged invalid and receive
    zero weight. Points exactly on the upper face are kept in range.
    """
    pts = np.asarray(pts, dtype=np.float64)
    mx, my, mz = shape
    valid = (
        (pts[:, 0] >= 0) & (pts[:, 0] <= mx - 1)
        & (pts[:, 1] >= 0) & (pts[:, 1] <= my - 1)
        & (pts[:, 2] >= 0) & (pts[:, 2] <= mz - 1)
    )
    safe = np.where(valid[:, None], pts, 0.0)
    i0 = np.minimum(np.floor(safe).astype(np.int64), np.array([mx - 2, my - 2, mz - 2]))
    i0 = np.maximum(i0, 0)
    f = safe - i0

    w0 = 1.0 - f
    flat0 = (i0[:, 0] * my + i0[:, 1]) * mz + i0[:, 2]
    strides = np.array([my * mz, mz, 1], dtype=np.int64)

    idx = np.empty((8, len(pts)), dtype=np.int64)
    wts = np.empty((8, len(pts)), dtype=np.float64)
    for corner in range(8):
        dx, dy, dz = (corner >> 2) & 1, (corner >> 1) & 1, corner & 1
        idx[corner] = flat0 + dx * strides[0] + dy * strides[1] + dz * strides[2]
        w = (f[:, 0] if dx else w0[:, 0]) * (f[:, 1] if dy else w0[:, 1]) * (
            f[:, 2] if dz else w0[:, 2]
        )
        wts[corner] = np.where(valid, w, 0.0)
    return idx, wts, valid


def trilinear_sample(grid: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample a 3D grid at fractional voxel coordinates.

    Returns (values, valid); out-of-range points get value 0 and
    valid=False.
    """
    grid = np.asarray(grid)
    idx, wts, valid = _corner_indices_weights(pts, grid.shape)
    flat = grid.reshape(-1)
    values = np.zeros(idx.shape[1], dtype=np.float64)
    for corner in range(8):
        values += wts[corner] * flat[idx[corner]]
    return values, valid


def trilinear_adjoint(pts: np.ndarray, values: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Spread point values onto a grid with the transposed trilinear weights."""
    values = np.asarray(values, dtype=np.float64)
    idx, wts, _ = _corner_indices_weights(pts, shape)
    size = shape[0] * shape[1] * shape[2]
    out = np.zeros(size, dtype=np.float64)
    for corner in range(8):
        out += np.bincount(idx[corner], weights=wts[corner] * values, minlength=size)
    return out.reshape(shape)
