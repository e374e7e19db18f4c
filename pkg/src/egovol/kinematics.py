"""Articulated arm+hand model driven by joint angles.

A chain is built in a body frame rooted at the shoulder anchor, with the
same axis directions as the camera (+x right, +y down, +z forward). Every
local frame keeps +z along its segment and +y towards the palm side. The
extrinsic transform then places the anchor relative to the camera.

Left arms are produced from the right-arm chain by reflecting the body
frame through its x = 0 plane before the extrinsics are applied, so a
mirrored pose rendered with mirrored extrinsics is the exact x-negation of
the original.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

# surface sampling pitch: 4 points per pixel footprint at 0.7 m for f = 224
DEFAULT_SPACING = 0.70 / (2 * 224.0)

N_KEYPOINTS = 22
FINGERS = ("thumb", "index", "middle", "ring", "little")
KEYPOINT_NAMES = (
    ("elbow", "wrist")
    + tuple(f"{f}_{j}" for f in FINGERS for j in ("j1", "j2", "j3"))
    + tuple(f"{f}_tip" for f in FINGERS)
)
ELBOW, WRIST = 0, 1
# first joint of every finger (thumb CMC and the four MCPs)
KNUCKLES = tuple(2 + 3 * i for i in range(5))
CLUSTER_KEYPOINTS = (ELBOW, WRIST) + KNUCKLES

THETA_NAMES = ("shoulder_azimuth", "shoulder_elevation", "shoulder_roll",
               "elbow_flexion", "elbow_twist", "wrist_flexion", "wrist_deviation")
PHI_NAMES = tuple(f"{f}_{j}" for f in FINGERS for j in ("flex1", "abduct", "flex2", "flex3"))

_deg = np.deg2rad
THETA_LIMITS = _deg(np.array([
    [-100, 100], [-100, 100], [-90, 90],
    [0, 150], [-90, 90],
    [-80, 80], [-80, 80],
], dtype=float))
PHI_LIMITS = _deg(np.array([[0, 100], [-30, 30], [0, 100], [0, 100]] * 5, dtype=float))

AXIS_X = np.array([1.0, 0.0, 0.0])
AXIS_Y = np.array([0.0, 1.0, 0.0])
AXIS_Z = np.array([0.0, 0.0, 1.0])
# finger flexion curls the +z segment axis towards +y (palm side)
FLEX = -AXIS_X

MIRROR_X = np.diag([-1.0, 1.0, 1.0, 1.0])


# --------------------------------------------------------------------------
# rigid transforms

def rotation(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def rigid(R=None, t=None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def translation(x: float, y: float, z: float) -> np.ndarray:
    return rigid(t=(x, y, z))


def euler_zyx(rz: float, ry: float, rx: float) -> np.ndarray:
    """Intrinsic Z-Y-X rotation (radians)."""
    return rotation(AXIS_Z, rz) @ rotation(AXIS_Y, ry) @ rotation(AXIS_X, rx)


def is_rigid(T, tol: float = 1e-9) -> bool:
    T = np.asarray(T, dtype=float)
    if T.shape != (4, 4) or not np.allclose(T[3], [0, 0, 0, 1], atol=tol):
        return False
    R = T[:3, :3]
    return (np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1) < tol)


def apply(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a 4x4 transform to an (n, 3) array of points."""
    return pts @ T[:3, :3].T + T[:3, 3]


def chest_mount(handedness: str = "right", lateral: float = 0.20,
                height: float = 0.15, depth: float = 0.0) -> np.ndarray:
    """Default extrinsics: shoulder anchor beside and above the chest camera."""
    sx = 1.0 if handedness == "right" else -1.0
    return translation(sx * lateral, -height, depth)


# --------------------------------------------------------------------------
# surface sampling

def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    a = np.pi * (3 - np.sqrt(5)) * i
    return np.stack([r * np.cos(a), r * np.sin(a), z], axis=1)


def sample_sphere(radius: float, spacing: float) -> np.ndarray:
    n = max(8, int(np.ceil(4 * np.pi * radius ** 2 / spacing ** 2)))
    return radius * _fibonacci_sphere(n)


def _tube(radius: float, length: float, spacing: float) -> np.ndarray:
    n_c = max(6, int(np.ceil(2 * np.pi * radius / spacing)))
    n_l = max(2, int(np.ceil(length / spacing)) + 1)
    a = 2 * np.pi * np.arange(n_c) / n_c
    z = np.linspace(0.0, length, n_l)
    A, Z = np.meshgrid(a, z)
    # stagger alternate rings to avoid aligned gaps
    A = A + (np.arange(n_l)[:, None] % 2) * (np.pi / n_c)
    return np.stack([radius * np.cos(A).ravel(), radius * np.sin(A).ravel(), Z.ravel()], axis=1)


def sample_capsule(length: float, radius: float, spacing: float) -> np.ndarray:
    """Capsule along +z from 0 to ``length``."""
    s = sample_sphere(radius, spacing)
    caps = np.concatenate([s[s[:, 2] < 0], s[s[:, 2] >= 0] + [0, 0, length]])
    return np.concatenate([_tube(radius, length, spacing), caps])


def _disc(radius: float, spacing: float) -> np.ndarray:
    pts = [np.zeros((1, 3))]
    for r in np.arange(spacing, radius + 1e-12, spacing):
        n = max(6, int(np.ceil(2 * np.pi * r / spacing)))
        a = 2 * np.pi * np.arange(n) / n
        pts.append(np.stack([r * np.cos(a), r * np.sin(a), np.zeros(n)], axis=1))
    return np.concatenate(pts)


def sample_cylinder(radius: float, height: float, spacing: float) -> np.ndarray:
    """Closed cylinder along +z, centered at the origin."""
    d = _disc(radius, spacing)
    return np.concatenate([
        _tube(radius, height, spacing) - [0, 0, height / 2],
        d - [0, 0, height / 2], d + [0, 0, height / 2]])


def sample_box(dims, spacing: float) -> np.ndarray:
    """Surface of an axis-aligned box of size ``dims`` centered at the origin."""
    dims = np.asarray(dims, dtype=float)
    h = dims / 2
    g = [np.linspace(-h[i], h[i], max(2, int(np.ceil(dims[i] / spacing)) + 1)) for i in range(3)]
    faces = []
    for ax in range(3):
        a, b = [i for i in range(3) if i != ax]
        A, B = np.meshgrid(g[a], g[b])
        for sign in (-1, 1):
            f = np.empty((A.size, 3))
            f[:, ax] = sign * h[ax]
            f[:, a] = A.ravel()
            f[:, b] = B.ravel()
            faces.append(f)
    return np.concatenate(faces)


# --------------------------------------------------------------------------
# model types

@dataclass(frozen=True)
class Joint:
    source: str   # "theta" or "phi"
    index: int
    axis: np.ndarray


@dataclass(frozen=True, eq=False)
class Segment:
    name: str
    parent: int
    offset: np.ndarray
    joints: tuple[Joint, ...]
    cloud: np.ndarray
    keypoints: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class KinematicChain:
    segments: tuple[Segment, ...]
    theta_limits: np.ndarray
    phi_limits: np.ndarray
    spacing: float

    @property
    def n_theta(self) -> int:
        return len(self.theta_limits)

    @property
    def n_phi(self) -> int:
        return len(self.phi_limits)

    @property
    def palm_index(self) -> int:
        return next(i for i, s in enumerate(self.segments) if s.name == "palm")

    def cloud_size(self) -> int:
        return sum(len(s.cloud) for s in self.segments)


@dataclass(frozen=True, eq=False)
class ObjectModel:
    shape: str
    dims: tuple[float, ...]
    attach: np.ndarray
    cloud: np.ndarray
    name: str = ""

    @classmethod
    def from_spec(cls, spec: dict, spacing: float = DEFAULT_SPACING, name: str = "") -> "ObjectModel":
        shape = spec["shape"]
        dims = tuple(float(d) for d in spec["dims"])
        if any(d <= 0 for d in dims):
            raise ValueError(f"object dimensions must be positive: {dims}")
        if shape == "box":
            local = sample_box(dims, spacing)
        elif shape == "cylinder":
            local = sample_cylinder(dims[0], dims[1], spacing)
        elif shape == "sphere":
            local = sample_sphere(dims[0], spacing)
        else:
            raise ValueError(f"unknown object shape {shape!r}")
        rz, ry, rx = np.deg2rad(spec.get("rotate_zyx_deg", (0, 0, 0)))
        attach = rigid(euler_zyx(rz, ry, rx), spec.get("position", (0, 0, 0)))
        return cls(shape, dims, attach, apply(attach, local), name)


@dataclass(frozen=True, eq=False)
class ArmHandPose:
    theta: np.ndarray
    phi: np.ndarray
    grasp_id: str = ""
    object_id: Optional[str] = None
    handedness: str = "right"

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float))
        if self.handedness not in ("left", "right"):
            raise ValueError(f"handedness must be left or right, got {self.handedness!r}")
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.phi))):
            raise ValueError("joint angles must be finite")


# --------------------------------------------------------------------------
# chain construction

# (proximal, middle, distal) lengths and radius, meters
FINGER_GEOMETRY = {
    "thumb": ((0.045, 0.035, 0.030), 0.0100),
    "index": ((0.045, 0.030, 0.030), 0.0085),
    "middle": ((0.050, 0.035, 0.030), 0.0090),
    "ring": ((0.045, 0.032, 0.030), 0.0085),
    "little": ((0.038, 0.030, 0.030), 0.0075),
}
UPPER_ARM = (0.28, 0.045)
FOREARM = (0.26, 0.035)
PALM = (0.09, 0.03, 0.10)


@lru_cache(maxsize=8)
def build_arm_chain(spacing: float = DEFAULT_SPACING) -> KinematicChain:
    """Procedural right arm: capsule limbs, box palm, three capsules per finger."""
    segs: list[Segment] = []

    def add(name, parent, offset, joints, cloud, keypoints=None):
        segs.append(Segment(name, parent, offset, tuple(joints), cloud, keypoints or {}))
        return len(segs) - 1

    ua_len, ua_r = UPPER_ARM
    fa_len, fa_r = FOREARM
    upper = add("upper_arm", -1, np.eye(4),
                [Joint("theta", 0, AXIS_Y), Joint("theta", 1, AXIS_X), Joint("theta", 2, AXIS_Z)],
                sample_capsule(ua_len, ua_r, spacing))
    fore = add("forearm", upper, translation(0, 0, ua_len),
               [Joint("theta", 3, AXIS_X), Joint("theta", 4, AXIS_Z)],
               sample_capsule(fa_len, fa_r, spacing), {ELBOW: np.zeros(3)})
    pw, pt, pl = PALM
    palm = add("palm", fore, translation(0, 0, fa_len),
               [Joint("theta", 5, -AXIS_X), Joint("theta", 6, AXIS_Y)],
               sample_box(PALM, spacing) + [0, 0, pl / 2], {WRIST: np.zeros(3)})

    bases = {
        "thumb": (rigid(rotation(AXIS_Y, np.deg2rad(-50)), (-0.035, 0.008, 0.025))),
        "index": translation(-0.030, 0, pl),
        "middle": translation(-0.010, 0, pl),
        "ring": translation(0.010, 0, pl),
        "little": rigid(rotation(AXIS_Y, np.deg2rad(8)), (0.030, 0, pl - 0.008)),
    }
    for fi, finger in enumerate(FINGERS):
        lengths, radius = FINGER_GEOMETRY[finger]
        p0 = 4 * fi
        kp_base = 2 + 3 * fi
        prox = add(f"{finger}_1", palm, bases[finger],
                   [Joint("phi", p0 + 1, AXIS_Y), Joint("phi", p0, FLEX)],
                   sample_capsule(lengths[0], radius, spacing), {kp_base: np.zeros(3)})
        mid = add(f"{finger}_2", prox, translation(0, 0, lengths[0]),
                  [Joint("phi", p0 + 2, FLEX)],
                  sample_capsule(lengths[1], radius * 0.92, spacing), {kp_base + 1: np.zeros(3)})
        add(f"{finger}_3", mid, translation(0, 0, lengths[1]),
            [Joint("phi", p0 + 3, FLEX)],
            sample_capsule(lengths[2], radius * 0.85, spacing),
            {kp_base + 2: np.zeros(3), 17 + fi: np.array([0.0, 0.0, lengths[2]])})

    return KinematicChain(tuple(segs), THETA_LIMITS.copy(), PHI_LIMITS.copy(), spacing)


# --------------------------------------------------------------------------
# forward kinematics

def segment_transforms(chain: KinematicChain, pose: ArmHandPose, extrinsics=None) -> list[np.ndarray]:
    """World (camera-frame) transform of every segment frame."""
    if pose.theta.shape != (chain.n_theta,) or pose.phi.shape != (chain.n_phi,):
        raise ValueError(
            f"pose has theta{pose.theta.shape}/phi{pose.phi.shape}, chain expects "
            f"({chain.n_theta},)/({chain.n_phi},)")
    if extrinsics is None:
        extrinsics = chest_mount(pose.handedness)
    root = np.asarray(extrinsics, dtype=float)
    if pose.handedness == "left":
        root = root @ MIRROR_X
    angles = {"theta": pose.theta, "phi": pose.phi}
    out: list[np.ndarray] = []
    for seg in chain.segments:
        G = (root if seg.parent < 0 else out[seg.parent]) @ seg.offset
        for j in seg.joints:
            G = G @ rigid(rotation(j.axis, angles[j.source][j.index]))
        out.append(G)
    return out


def forward_keypoints(chain: KinematicChain, pose: ArmHandPose, extrinsics=None) -> np.ndarray:
    Gs = segment_transforms(chain, pose, extrinsics)
    kp = np.empty((N_KEYPOINTS, 3))
    for seg, G in zip(chain.segments, Gs):
        for i, u in seg.keypoints.items():
            kp[i] = G[:3, :3] @ u + G[:3, 3]
    return kp


def forward_kinematics(chain: KinematicChain, pose: ArmHandPose, extrinsics=None,
                       obj: Optional[ObjectModel] = None):
    """Map the chain's keypoints and surface cloud into camera coordinates.

    Returns ``(keypoints (22, 3), cloud (n, 3))``. An attached object cloud
    rides rigidly with the palm frame.
    """
    Gs = segment_transforms(chain, pose, extrinsics)
    kp = np.empty((N_KEYPOINTS, 3))
    parts = []
    for seg, G in zip(chain.segments, Gs):
        for i, u in seg.keypoints.items():
            kp[i] = G[:3, :3] @ u + G[:3, 3]
        parts.append(apply(G, seg.cloud))
    if obj is not None:
        parts.append(apply(Gs[chain.palm_index], obj.cloud))
    return kp, np.concatenate(parts)


def clamp_pose(chain: KinematicChain, pose: ArmHandPose) -> ArmHandPose:
    theta = np.clip(pose.theta, chain.theta_limits[:, 0], chain.theta_limits[:, 1])
    phi = np.clip(pose.phi, chain.phi_limits[:, 0], chain.phi_limits[:, 1])
    return replace(pose, theta=theta, phi=phi)


def perturb_pose(pose: ArmHandPose, sigma: float, rng: np.random.Generator,
                 limits: Optional[np.ndarray] = None) -> ArmHandPose:
    """Gaussian noise on arm angles only; hand angles stay fixed to the grasp."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return pose
    lim = THETA_LIMITS if limits is None else limits
    theta = pose.theta + rng.normal(0.0, sigma, size=pose.theta.shape)
    return replace(pose, theta=np.clip(theta, lim[:, 0], lim[:, 1]))


def mirror_pose(pose: ArmHandPose) -> ArmHandPose:
    """Same joint angles on the opposite arm (handedness flipped)."""
    return replace(pose, handedness="left" if pose.handedness == "right" else "right")


# --------------------------------------------------------------------------
# grasp library

GRASP_FILE_VERSION = 1


@dataclass(frozen=True, eq=False)
class Grasp:
    grasp_id: str
    theta: np.ndarray
    phi: np.ndarray
    obj: Optional[dict] = None

    def pose(self, handedness: str = "right") -> ArmHandPose:
        return ArmHandPose(self.theta.copy(), self.phi.copy(), self.grasp_id,
                           self.obj["name"] if self.obj else None, handedness)


@dataclass(frozen=True, eq=False)
class GraspLibrary:
    grasps: tuple[Grasp, ...]
    header: dict

    def __len__(self):
        return len(self.grasps)

    def __getitem__(self, grasp_id: str) -> Grasp:
        for g in self.grasps:
            if g.grasp_id == grasp_id:
                return g
        raise KeyError(f"unknown grasp {grasp_id!r}")

    @property
    def ids(self) -> list[str]:
        return [g.grasp_id for g in self.grasps]

    def subset(self, n: int) -> "GraspLibrary":
        return GraspLibrary(self.grasps[:n], self.header)

    def object_model(self, grasp_id: str, spacing: float = DEFAULT_SPACING) -> Optional[ObjectModel]:
        return _object_for(self[grasp_id].obj, spacing)


def _object_for(spec: Optional[dict], spacing: float) -> Optional[ObjectModel]:
    if spec is None:
        return None
    key = json.dumps(spec, sort_keys=True)
    return _cached_object(key, spacing)


@lru_cache(maxsize=256)
def _cached_object(key: str, spacing: float) -> ObjectModel:
    spec = json.loads(key)
    return ObjectModel.from_spec(spec, spacing, spec.get("name", ""))


def load_grasps(path: Optional[str | Path] = None) -> GraspLibrary:
    """Load a grasp library JSON; the shipped library when ``path`` is None."""
    if path is None:
        text = resources.files("egovol").joinpath("grasps.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"grasp file is not valid JSON: {e}") from None
    if not isinstance(data, dict) or not isinstance(data.get("grasps"), dict):
        raise ValueError("grasp file needs a 'grasps' object")
    if data.get("version") != GRASP_FILE_VERSION:
        raise ValueError(f"unsupported grasp file version {data.get('version')!r}")
    unit = data.get("angle_unit", "deg")
    conv = np.deg2rad if unit == "deg" else (lambda a: np.asarray(a, dtype=float))
    grasps = []
    for gid, g in data["grasps"].items():
        if "phi" not in g or ("theta" not in g and "default_theta" not in data):
            raise ValueError(f"grasp {gid!r} needs phi and theta (or a file-level default_theta)")
        phi = conv(np.asarray(g["phi"], dtype=float))
        theta = conv(np.asarray(g["theta"] if "theta" in g else data["default_theta"], dtype=float))
        if phi.shape != (20,) or theta.shape != (7,):
            raise ValueError(f"grasp {gid!r}: expected 20 phi and 7 theta angles")
        theta = np.clip(theta, THETA_LIMITS[:, 0], THETA_LIMITS[:, 1])
        phi = np.clip(phi, PHI_LIMITS[:, 0], PHI_LIMITS[:, 1])
        grasps.append(Grasp(gid, theta, phi, g.get("object")))
    header = {k: v for k, v in data.items() if k != "grasps"}
    return GraspLibrary(tuple(grasps), header)
