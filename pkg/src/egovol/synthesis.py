"""Synthetic egocentric depth exemplars.

Each limb is a dense point cloud; depth maps are produced by casting every
point into the pixel its ray passes through and keeping the nearest radial
distance. Arm poses are drawn by Gaussian perturbation of a grasp's arm
angles and kept only if enough keypoints land inside the image.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .camera import CameraModel, pixel_ray, project_many
from .kinematics import (
    ArmHandPose,
    GraspLibrary,
    KinematicChain,
    build_arm_chain,
    chest_mount,
    forward_keypoints,
    forward_kinematics,
    load_grasps,
    mirror_pose,
    perturb_pose,
)

NO_MEASUREMENT = 0.0
VISIBILITY_THRESHOLD = 0.9
# largest splat half-width in pixels for points very close to the lens
MAX_SPLAT = 6


def _far(z: np.ndarray) -> np.ndarray:
    """Depth map with NO_MEASUREMENT replaced by +inf (for min-compositing)."""
    z = np.asarray(z)
    return np.where(z == NO_MEASUREMENT, np.inf, z)


def _near(z: np.ndarray) -> np.ndarray:
    return np.where(np.isinf(z), NO_MEASUREMENT, z).astype(np.float32)


def raycast_depth(cam: CameraModel, cloud, spacing: Optional[float] = None) -> np.ndarray:
    """Nearest radial distance of the cloud along every pixel ray.

    With ``spacing=None`` each point lands in exactly one pixel. Otherwise
    points stand for surface patches ``spacing`` meters across and also
    cover the neighbouring pixels their patch projects onto, which keeps
    close-range surfaces hole-free without resampling the cloud.
    """
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    pts = pts[pts[:, 2] > 0]
    img = np.full(cam.height * cam.width, np.inf)
    if len(pts) == 0:
        return _near(img.reshape(cam.height, cam.width))
    z = pts[:, 2]
    rad = np.linalg.norm(pts, axis=1)
    px = np.floor(cam.f * pts[:, 0] / z + cam.cx + 0.5)
    py = np.floor(cam.f * pts[:, 1] / z + cam.cy + 0.5)
    if spacing is None:
        r = np.zeros(len(pts), dtype=int)
    else:
        r = np.clip(np.ceil(spacing * cam.f / (2 * z) - 0.5), 0, MAX_SPLAT).astype(int)
    near_img = ((px >= -r) & (px < cam.width + r) & (py >= -r) & (py < cam.height + r))
    px, py, rad, r = px[near_img].astype(int), py[near_img].astype(int), rad[near_img], r[near_img]
    for rr in np.unique(r):
        sel = r == rr
        sx, sy, sr = px[sel], py[sel], rad[sel]
        for dy in range(-rr, rr + 1):
            for dx in range(-rr, rr + 1):
                qx, qy = sx + dx, sy + dy
                ok = (qx >= 0) & (qx < cam.width) & (qy >= 0) & (qy < cam.height)
                np.minimum.at(img, qy[ok] * cam.width + qx[ok], sr[ok])
    return _near(img.reshape(cam.height, cam.width))


def visibility_fraction(cam: CameraModel, keypoints3d) -> float:
    kp = np.asarray(keypoints3d, dtype=float).reshape(-1, 3)
    p = project_many(cam, kp)
    inside = ((kp[:, 2] > 0) & (p[:, 0] >= 0) & (p[:, 0] < cam.width)
              & (p[:, 1] >= 0) & (p[:, 1] < cam.height))
    return float(inside.mean())


def composite_background(fore: np.ndarray, back: np.ndarray) -> np.ndarray:
    """Per-pixel nearest of two depth maps; missing pixels count as infinitely far."""
    fore = np.asarray(fore)
    back = np.asarray(back)
    if fore.shape != back.shape:
        raise ValueError(f"depth map shapes differ: {fore.shape} vs {back.shape}")
    return _near(np.minimum(_far(fore), _far(back)))


@dataclass(eq=False)
class ExemplarRecord:
    depth: np.ndarray                 # (height, width) float32 radial meters, 0 = none
    keypoints3d: np.ndarray           # (arms, 22, 3) float32
    keypoints2d: np.ndarray           # (arms, 22, 2) float32, NaN where z <= 0
    handedness: tuple[str, ...]
    grasp_ids: tuple[str, ...]
    seed: int = 0
    sigma: float = float("nan")
    class_label: Optional[int] = None

    @property
    def arm_count(self) -> int:
        return len(self.handedness)

    @property
    def dominant(self) -> int:
        """Index of the arm used for clustering (the right arm when present)."""
        return self.handedness.index("right") if "right" in self.handedness else 0


def make_record(cam: CameraModel, depth, keypoints3d, handedness, grasp_ids,
                seed: int = 0, sigma: float = float("nan")) -> ExemplarRecord:
    kp3 = np.asarray(keypoints3d, dtype=np.float32).reshape(-1, 22, 3)
    kp2 = project_many(cam, kp3.astype(float)).astype(np.float32)
    return ExemplarRecord(np.asarray(depth, dtype=np.float32), kp3, kp2,
                          tuple(handedness), tuple(grasp_ids), int(seed), float(sigma))


def check_record(cam: CameraModel, rec: ExemplarRecord, atol: float = 1e-3) -> None:
    """Raise ValueError unless the record's stored invariants hold."""
    if rec.depth.shape != (cam.height, cam.width):
        raise ValueError("depth map does not match the camera")
    if rec.keypoints3d.shape != (rec.arm_count, 22, 3) or rec.keypoints2d.shape != (rec.arm_count, 22, 2):
        raise ValueError("keypoint sets do not match arm count")
    kp = rec.keypoints3d.astype(float)
    front = kp[..., 2] > 0
    expect = project_many(cam, kp)
    if not np.allclose(expect[front], rec.keypoints2d[front], atol=atol, rtol=0):
        raise ValueError("2D keypoints are not the projection of the 3D keypoints")
    d = rec.depth[rec.depth != NO_MEASUREMENT]
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise ValueError("depth values must be finite and positive")


# --------------------------------------------------------------------------
# single arm rendering

def propose_arm(chain: KinematicChain, library: GraspLibrary, grasp_id: str, sigma: float,
                cam: CameraModel, rng: np.random.Generator, handedness: str = "right",
                extrinsics=None):
    """Perturb a grasp's arm pose; returns ``(pose, keypoints)`` or None if rejected."""
    pose = library[grasp_id].pose("right")
    if handedness == "left":
        pose = mirror_pose(pose)
    pose = perturb_pose(pose, sigma, rng, chain.theta_limits)
    ext = chest_mount(handedness) if extrinsics is None else extrinsics
    kp = forward_keypoints(chain, pose, ext)
    if visibility_fraction(cam, kp) < VISIBILITY_THRESHOLD:
        return None
    return pose, kp


def render_arm(chain: KinematicChain, library: GraspLibrary, pose: ArmHandPose,
               cam: CameraModel, extrinsics=None) -> tuple[np.ndarray, np.ndarray]:
    ext = chest_mount(pose.handedness) if extrinsics is None else extrinsics
    obj = library.object_model(pose.grasp_id, chain.spacing)
    kp, cloud = forward_kinematics(chain, pose, ext, obj)
    return kp, raycast_depth(cam, cloud, chain.spacing)


def sample_exemplar(chain: KinematicChain, library: GraspLibrary, grasp_id: str, sigma: float,
                    cam: CameraModel, rng, handedness: str = "right") -> Optional[ExemplarRecord]:
    """One rejection-sampling draw. Returns None (rejected) or a single-arm record.

    ``rng`` may be an integer seed, which is stored on the record so the
    draw can be replayed exactly.
    """
    seed = int(rng) if isinstance(rng, (int, np.integer)) else 0
    gen = np.random.default_rng(seed) if isinstance(rng, (int, np.integer)) else rng
    drawn = propose_arm(chain, library, grasp_id, sigma, cam, gen, handedness)
    if drawn is None:
        return None
    pose, _ = drawn
    kp, depth = render_arm(chain, library, pose, cam)
    return make_record(cam, depth, kp[None], (handedness,), (grasp_id,), seed, sigma)


def pair_arms(left: ExemplarRecord, right: ExemplarRecord, delta: float,
              cam: Optional[CameraModel] = None) -> Optional[ExemplarRecord]:
    """Merge two single-arm records if their depth maps never come within ``delta``.

    The gap is only tested where both maps carry a measurement. Returns None
    for incompatible pairs.
    """
    if left.arm_count != 1 or right.arm_count != 1:
        raise ValueError("pair_arms expects two single-arm records")
    if left.handedness == right.handedness:
        raise ValueError(f"cannot pair two {left.handedness[0]} arms")
    if right.handedness[0] != "right":
        left, right = right, left
    zl, zr = left.depth, right.depth
    both = (zl != NO_MEASUREMENT) & (zr != NO_MEASUREMENT)
    if np.any(np.abs(zl[both].astype(float) - zr[both].astype(float)) <= delta):
        return None
    merged = _near(np.minimum(_far(zl), _far(zr)))
    kp3 = np.concatenate([right.keypoints3d, left.keypoints3d])
    kp2 = np.concatenate([right.keypoints2d, left.keypoints2d])
    return ExemplarRecord(merged, kp3, kp2, ("right", "left"),
                          (right.grasp_ids[0], left.grasp_ids[0]), right.seed, right.sigma)


# --------------------------------------------------------------------------
# backgrounds

def _ray_grid(cam: CameraModel) -> np.ndarray:
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    return pixel_ray(cam, xs, ys)


def render_plane(cam: CameraModel, normal, offset: float, rays=None) -> np.ndarray:
    """Radial depth of the plane ``normal . p = offset`` (inf where not hit)."""
    rays = _ray_grid(cam) if rays is None else rays
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    denom = rays @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = offset / denom
    return np.where((denom != 0) & (t > 0), t, np.inf)


def render_box(cam: CameraModel, lo, hi, rays=None) -> np.ndarray:
    """Radial depth of an axis-aligned box (slab test; inf where missed)."""
    rays = _ray_grid(cam) if rays is None else rays
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / rays
        t1 = lo * inv
        t2 = hi * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= np.maximum(tmin, 0)) & (tmax > 0)
    return np.where(hit, np.where(tmin > 0, tmin, tmax), np.inf)


def procedural_background(cam: CameraModel, rng: np.random.Generator) -> np.ndarray:
    """1-3 planes between 0.8 and 3 m plus up to five boxes, all beyond 0.8 m."""
    rays = _ray_grid(cam)
    depth = np.full((cam.height, cam.width), np.inf)
    for k in range(int(rng.integers(1, 4))):
        if k == 0:
            # wall roughly facing the camera
            n = np.array([rng.normal(0, 0.2), rng.normal(0, 0.2), 1.0])
            d = rng.uniform(0.8, 3.0)
        else:
            # floor, table or side wall
            axis = rng.choice([1, 0])
            n = np.zeros(3)
            n[axis] = rng.choice([-1.0, 1.0])
            n += rng.normal(0, 0.15, 3)
            d = rng.uniform(0.8, 3.0)
        depth = np.minimum(depth, render_plane(cam, n, d * np.linalg.norm(n), rays))
    for _ in range(int(rng.integers(0, 6))):
        half = rng.uniform(0.05, 0.3, 3)
        # every box point lies within |half| of the centre, so the whole box stays beyond 0.8 m
        dist = rng.uniform(0.8, 3.0) + np.linalg.norm(half)
        direction = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.4, 0.4), 1.0])
        center = dist * direction / np.linalg.norm(direction)
        depth = np.minimum(depth, render_box(cam, center - half, center + half, rays))
    return _near(depth)


def background_pool(cam: CameraModel, n: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng([seed, 0xB6])
    return [procedural_background(cam, rng) for _ in range(n)]


def load_background_pool(paths: Sequence[str], cam: CameraModel, planar: bool = False) -> list[np.ndarray]:
    """Import real depth maps (``.npy``, meters, 0 = missing)."""
    from .camera import radial_from_planar_image
    pool = []
    for p in paths:
        z = np.load(p).astype(float)
        if z.shape != (cam.height, cam.width):
            raise ValueError(f"{p}: shape {z.shape} does not match the camera")
        if planar:
            z = radial_from_planar_image(cam, z)
        pool.append(z.astype(np.float32))
    if not pool:
        raise ValueError("background pool is empty")
    return pool


# --------------------------------------------------------------------------
# dataset generation

@dataclass
class SynthesisConfig:
    n: int = 1000
    sigma: float = 0.15
    pair_rate: float = 0.25
    delta: float = 0.02
    seed: int = 0
    backgrounds: bool = True
    n_backgrounds: int = 32
    background_files: list = field(default_factory=list)
    n_grasps: Optional[int] = None
    grasps_path: Optional[str] = None
    noise_std: float = 0.0
    max_attempts: int = 1000
    max_pair_attempts: int = 20

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be non-negative")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0 <= self.pair_rate <= 1:
            raise ValueError("pair_rate must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


class Synthesizer:
    """Holds the chain, grasp library and background pool for one config.

    ``record(index)`` is a pure function of (config, index): record ``i``
    uses its own generator seeded with ``config.seed + i``.
    """

    def __init__(self, cam: CameraModel, config: SynthesisConfig):
        self.cam = cam
        self.config = config
        self.chain = build_arm_chain(cam.z_max / (2 * cam.f))
        lib = load_grasps(config.grasps_path)
        self.library = lib.subset(config.n_grasps) if config.n_grasps else lib
        if config.backgrounds:
            if config.background_files:
                self.pool = load_background_pool(config.background_files, cam)
            else:
                if config.n_backgrounds < 1:
                    raise ValueError("background pool is empty")
                self.pool = background_pool(cam, config.n_backgrounds, config.seed)
        else:
            self.pool = []

    def header(self) -> dict:
        return {
            "camera": self.cam.to_dict(),
            "synthesis": self.config.to_dict(),
            "grasps": self.library.ids,
            "config_hash": config_hash({"camera": self.cam.to_dict(),
                                        "synthesis": self.config.to_dict(),
                                        "grasps": self.library.ids}),
        }

    def _draw_arm(self, rng: np.random.Generator, handedness: str):
        ids = self.library.ids
        for _ in range(self.config.max_attempts):
            gid = ids[int(rng.integers(len(ids)))]
            drawn = propose_arm(self.chain, self.library, gid, self.config.sigma,
                                self.cam, rng, handedness)
            if drawn is not None:
                kp, depth = render_arm(self.chain, self.library, drawn[0], self.cam)
                return make_record(self.cam, depth, kp[None], (handedness,), (gid,))
        raise RuntimeError(f"rejection sampling failed after {self.config.max_attempts} attempts")

    def record(self, index: int) -> ExemplarRecord:
        cfg = self.config
        seed = cfg.seed + index
        rng = np.random.default_rng(seed)
        two = rng.random() < cfg.pair_rate
        rec = self._draw_arm(rng, "right")
        if two:
            for _ in range(cfg.max_pair_attempts):
                left = self._draw_arm(rng, "left")
                merged = pair_arms(left, rec, cfg.delta)
                if merged is not None:
                    rec = merged
                    break
        depth = rec.depth
        if self.pool:
            depth = composite_background(depth, self.pool[int(rng.integers(len(self.pool)))])
        if cfg.noise_std > 0:
            m = depth != NO_MEASUREMENT
            noisy = depth[m] + rng.normal(0, cfg.noise_std, m.sum())
            depth = depth.copy()
            depth[m] = np.maximum(noisy, 1e-4)
        rec.depth = depth.astype(np.float32)
        rec.seed = seed
        rec.sigma = cfg.sigma
        return rec


_WORKER: Optional[Synthesizer] = None


def _init_worker(cam_dict, cfg_dict):
    global _WORKER
    _WORKER = Synthesizer(CameraModel.from_dict(cam_dict), SynthesisConfig(**cfg_dict))


def _work(index: int) -> ExemplarRecord:
    return _WORKER.record(index)


def iter_records(synth: Synthesizer, start: int = 0, stop: Optional[int] = None,
                 threads: int = 1) -> Iterator[ExemplarRecord]:
    """Yield records ``start..stop`` in index order, optionally across processes."""
    stop = synth.config.n if stop is None else stop
    if threads <= 1:
        for i in range(start, stop):
            yield synth.record(i)
        return
    import multiprocessing as mp
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
    with ctx.Pool(threads, _init_worker, (synth.cam.to_dict(), synth.config.to_dict())) as pool:
        yield from pool.imap(_work, range(start, stop), chunksize=8)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def generate_dataset(cam: CameraModel, config: SynthesisConfig, out, threads: int = 1,
                     extra_header: Optional[dict] = None) -> dict:
    """Stream ``config.n`` records to ``out`` (path or binary file object).

    Returns the header written.
    """
    from .dataset import DatasetWriter
    synth = Synthesizer(cam, config)
    header = synth.header()
    header.update(extra_header or {})
    with DatasetWriter(out, header, config.n) as w:
        for rec in iter_records(synth, threads=threads):
            w.write(rec)
    return header
