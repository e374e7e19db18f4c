"""Binarized volumetric depth features.

The perspective-aware feature bins the workspace into spherical voxels
whose image footprint is a fixed pixel block. A depth map then reduces to a
quantized map ``q[u, v]`` (the radial bin of the first surface in each
column, or ``nw`` for "nothing inside the workspace"), and the dense binary
grid is the backfilled step function ``b[u, v, w] = (w >= q[u, v])``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_depth_maps
from .camera import CameraModel, planar_from_radial
from .synthesis import NO_MEASUREMENT

ORTHO_DIMS = (0.64, 0.48, 0.70)
ORTHO_CUBE = 0.02


def _blocks(cam: CameraModel, z: np.ndarray) -> np.ndarray:
    """(n, H, W) -> (n, nu, nv, pixels per block)."""
    bw, bh = cam.block_shape
    n = z.shape[0]
    return z.reshape(n, cam.nv, bh, cam.nu, bw).transpose(0, 3, 1, 2, 4).reshape(n, cam.nu, cam.nv, bh * bw)


def quantize_depth(cam: CameraModel, z) -> np.ndarray:
    """Median-filter each pixel block and quantize it to a radial bin.

    Returns an ``(nu, nv)`` int array (or ``(n, nu, nv)`` for a stack). A
    block maps to the sentinel ``nw`` when fewer than half of its pixels
    carry a measurement inside ``z_max`` or the median itself is not
    inside. The median is taken over measured pixels only, lower middle
    element for even counts.
    """
    single = np.ndim(z) == 2
    z = check_depth_maps(z, cam)
    blk = _blocks(cam, z)
    size = blk.shape[-1]
    measured = blk != NO_MEASUREMENT
    n_meas = measured.sum(-1)
    n_in = (measured & (blk <= cam.z_max)).sum(-1)
    ordered = np.sort(np.where(measured, blk, np.inf), axis=-1)
    k = np.maximum(n_meas - 1, 0) // 2
    med = np.take_along_axis(ordered, k[..., None], axis=-1)[..., 0]
    q = np.minimum(np.floor(cam.nw * med / cam.z_max), cam.nw - 1)
    empty = (2 * n_in < size) | (n_meas == 0) | ~(med < cam.z_max)
    q = np.where(empty, cam.nw, q).astype(np.intp)
    return q[0] if single else q


def to_voxels(q, nw: int) -> np.ndarray:
    """Backfilled binary grid: ones at ``w >= q[u, v]``; sentinel columns stay empty."""
    q = np.asarray(q)
    return np.arange(nw) >= q[..., None]


def from_voxels(b) -> np.ndarray:
    """Inverse of :func:`to_voxels`; raises if a column is not a step function."""
    b = np.asarray(b, dtype=bool)
    nw = b.shape[-1]
    q = np.where(b.any(-1), b.argmax(-1), nw)
    if not np.array_equal(to_voxels(q, nw), b):
        raise ValueError("voxel columns are not backfilled step functions")
    return q


def occupancy_count(q, nw: int) -> int:
    return int(np.sum(nw - np.asarray(q)))


def backproject(cam: CameraModel, z) -> np.ndarray:
    """3D camera-frame points for every measured pixel of a radial depth map."""
    z = np.asarray(z, dtype=float)
    ys, xs = np.nonzero(z != NO_MEASUREMENT)
    r = z[ys, xs]
    zp = planar_from_radial(cam, r, xs, ys)
    return np.stack([zp * (xs - cam.cx) / cam.f, zp * (ys - cam.cy) / cam.f, zp], axis=1)


def ortho_grid_shape(dims=ORTHO_DIMS, cube: float = ORTHO_CUBE) -> tuple[int, int, int]:
    return tuple(int(round(d / cube)) for d in dims)


def orthographic_voxels_from_points(points, dims=ORTHO_DIMS, cube: float = ORTHO_CUBE) -> np.ndarray:
    """Occupancy of axis-aligned cubes tiling ``x in [-dx/2, dx/2)``, ``y in [-dy/2, dy/2)``, ``z in [0, dz)``."""
    shape = ortho_grid_shape(dims, cube)
    grid = np.zeros(shape, dtype=bool)
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    lo = np.array([-dims[0] / 2, -dims[1] / 2, 0.0])
    idx = np.floor((p - lo) / cube).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < shape), axis=1)
    idx = idx[ok]
    grid[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return grid


def orthographic_voxels(cam: CameraModel, z, dims=ORTHO_DIMS, cube: float = ORTHO_CUBE) -> np.ndarray:
    """Orthographic baseline: back-project and bin into 2 cm cubes, no backfill."""
    return orthographic_voxels_from_points(backproject(cam, z), dims, cube)


class PerspectiveVoxelizer(TransformerMixin, BaseEstimator):
    """Depth maps -> perspective-aware voxel features.

    ``output="quantized"`` gives ``(n, nu*nv)`` bin indices (the sparse form,
    u-major); ``output="dense"`` gives the flattened backfilled binary grid.
    """

    def __init__(self, camera: CameraModel | None = None, output: str = "quantized"):
        self.camera = camera
        self.output = output

    def _cam(self) -> CameraModel:
        return self.camera if self.camera is not None else CameraModel()

    def fit(self, X, y=None):
        if self.output not in ("quantized", "dense"):
            raise ValueError(f"output must be 'quantized' or 'dense', got {self.output!r}")
        check_depth_maps(X, self._cam())
        self.n_features_out_ = self._n_out()
        return self

    def _n_out(self) -> int:
        cam = self._cam()
        n = cam.nu * cam.nv
        return n if self.output == "quantized" else n * cam.nw

    def transform(self, X):
        cam = self._cam()
        q = quantize_depth(cam, check_depth_maps(X, cam))
        q = q.reshape(len(q), -1)
        if self.output == "dense":
            return to_voxels(q, cam.nw).reshape(len(q), -1).astype(np.uint8)
        return q


class OrthographicVoxelizer(TransformerMixin, BaseEstimator):
    """Depth maps -> flattened orthographic cube occupancy."""

    def __init__(self, camera: CameraModel | None = None, dims=ORTHO_DIMS, cube: float = ORTHO_CUBE):
        self.camera = camera
        self.dims = dims
        self.cube = cube

    def fit(self, X, y=None):
        self.n_features_out_ = int(np.prod(ortho_grid_shape(self.dims, self.cube)))
        return self

    def transform(self, X):
        cam = self.camera if self.camera is not None else CameraModel()
        X = check_depth_maps(X, cam)
        return np.stack([orthographic_voxels(cam, z, self.dims, self.cube).ravel() for z in X]).astype(np.uint8)


@dataclass(eq=False)
class FeatureSet:
    """Quantized maps plus dominant-arm ground truth for a batch of exemplars."""

    camera: CameraModel
    q: np.ndarray              # (n, nu*nv) bin indices
    keypoints3d: np.ndarray    # (n, 22, 3)
    keypoints2d: np.ndarray    # (n, 22, 2)
    two_arm: np.ndarray        # (n,) bool

    def __len__(self) -> int:
        return len(self.q)

    @classmethod
    def from_records(cls, records, cam: CameraModel) -> "FeatureSet":
        q, k3, k2, two = [], [], [], []
        for r in records:
            q.append(quantize_depth(cam, r.depth).ravel())
            d = r.dominant
            k3.append(r.keypoints3d[d])
            k2.append(r.keypoints2d[d])
            two.append(r.arm_count == 2)
        n = len(q)
        return cls(cam,
                   np.array(q, dtype=np.intp).reshape(n, cam.nu * cam.nv),
                   np.array(k3, dtype=np.float64).reshape(n, 22, 3),
                   np.array(k2, dtype=np.float64).reshape(n, 22, 2),
                   np.array(two, dtype=bool))

    def subset(self, idx) -> "FeatureSet":
        return FeatureSet(self.camera, self.q[idx], self.keypoints3d[idx],
                          self.keypoints2d[idx], self.two_arm[idx])
