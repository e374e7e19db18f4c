"""Pinhole depth camera and the spherical (perspective-aware) binning grid.

Coordinates follow the usual vision convention: +x right, +y down, +z
forward. Pixel centers sit at integer coordinates.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


class BehindCameraError(ValueError):
    """Raised when projecting a point with non-positive depth."""


@dataclass(frozen=True)
class CameraModel:
    f: float = 224.0
    cx: float = 160.0
    cy: float = 120.0
    width: int = 320
    height: int = 240
    z_max: float = 0.70
    nu: int = 32
    nv: int = 24
    nw: int = 35

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if not self.z_max > 0:
            raise ValueError(f"z_max must be positive, got {self.z_max}")
        for name in ("width", "height", "nu", "nv", "nw"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.width % self.nu or self.height % self.nv:
            raise ValueError(
                f"image {self.width}x{self.height} is not an integer multiple "
                f"of the {self.nu}x{self.nv} grid")

    @property
    def block_shape(self) -> tuple[int, int]:
        """Pixel block (width, height) covered by one (u, v) bin."""
        return self.width // self.nu, self.height // self.nv

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.nu, self.nv, self.nw

    def with_grid(self, nu: int, nv: int, nw: int) -> "CameraModel":
        d = self.to_dict()
        d.update(nu=nu, nv=nv, nw=nw)
        return CameraModel.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(f=float(d["f"]), cx=float(d["cx"]), cy=float(d["cy"]),
                   width=int(d["width"]), height=int(d["height"]),
                   z_max=float(d["z_max"]), nu=int(d["nu"]), nv=int(d["nv"]),
                   nw=int(d["nw"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def project(cam: CameraModel, p) -> np.ndarray:
    """Project camera-frame point(s) ``(..., 3)`` to pixel coordinates ``(..., 2)``.

    No clamping to the image is done; callers check visibility.
    """
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("cannot project a point with z <= 0")
    x = cam.f * p[..., 0] / z + cam.cx
    y = cam.f * p[..., 1] / z + cam.cy
    return np.stack([x, y], axis=-1)


def project_many(cam: CameraModel, p) -> np.ndarray:
    """Like :func:`project` but returns NaN rows for points with z <= 0."""
    p = np.asarray(p, dtype=float)
    out = np.full(p.shape[:-1] + (2,), np.nan)
    ok = p[..., 2] > 0
    if np.any(ok):
        out[ok] = project(cam, p[ok])
    return out


def pixel_ray(cam: CameraModel, x, y) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = np.stack([(x - cam.cx) / cam.f, (y - cam.cy) / cam.f, np.ones_like(x)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_norm_factor(cam: CameraModel, x, y):
    """Length of the un-normalized ray ((x-cx)/f, (y-cy)/f, 1)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.sqrt(((x - cam.cx) / cam.f) ** 2 + ((y - cam.cy) / cam.f) ** 2 + 1.0)


def radial_from_planar(cam: CameraModel, z_planar, x, y):
    """Convert sensor planar depth at pixel (x, y) to radial distance."""
    return np.asarray(z_planar, dtype=float) * ray_norm_factor(cam, x, y)


def planar_from_radial(cam: CameraModel, r, x, y):
    return np.asarray(r, dtype=float) / ray_norm_factor(cam, x, y)


def radial_from_planar_image(cam: CameraModel, z_planar: np.ndarray) -> np.ndarray:
    """Whole-image version of :func:`radial_from_planar` (zeros stay zero)."""
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    return radial_from_planar(cam, z_planar, xs, ys)


def bin_of_pixel(cam: CameraModel, x, y):
    """Spherical-grid column (u, v) whose pixel block contains pixel (x, y)."""
    x = np.asarray(x)
    y = np.asarray(y)
    if np.any((x < 0) | (x >= cam.width) | (y < 0) | (y >= cam.height)):
        raise ValueError("pixel outside the image")
    u = np.floor(x * cam.nu / cam.width).astype(int)
    v = np.floor(y * cam.nv / cam.height).astype(int)
    if u.ndim == 0:
        return int(u), int(v)
    return u, v
