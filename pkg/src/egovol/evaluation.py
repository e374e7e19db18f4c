"""Held-out evaluation, ablation sweeps and scoring benchmarks."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .camera import CameraModel
from .features import FeatureSet, quantize_depth
from .kinematics import WRIST
from .model import (OpCounter, PoseModel, cluster_vector, fit_pose_model, nearest_center,
                    score_fast)
from ._validation import check_depth_maps

SWEEP_AXES = ("k", "grid", "train_size")
_INTRINSICS = ("f", "cx", "cy", "width", "height")


class CameraMismatchError(ValueError):
    pass


@dataclass
class EvalReport:
    n: int
    k: int
    tau_3d: float
    accuracy: float                  # wrist within tau_3d
    cluster_accuracy: float          # exact class label
    confusion: np.ndarray            # (K, K), rows = true class
    mean_error_2d: float             # pixels, over all keypoints
    mean_error_3d: float             # meters, over all keypoints
    latency_mean: float              # seconds per frame
    latency_p95: float
    config: dict = field(default_factory=dict)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("confusion")
        return d

    def to_dict(self) -> dict:
        d = self.summary()
        d["confusion"] = self.confusion.tolist()
        return d


def check_camera(model_cam: CameraModel, data_cam: CameraModel) -> None:
    """Intrinsics must agree; the grid is taken from the model."""
    a, b = model_cam.to_dict(), data_cam.to_dict()
    bad = [key for key in _INTRINSICS if a[key] != b[key]]
    if bad:
        raise CameraMismatchError(
            "test data and model disagree on " + ", ".join(f"{k} ({b[k]} vs {a[k]})" for k in bad))


def _features(model: PoseModel, test):
    """FeatureSet for ``test`` on the model grid, plus per-frame quantization times."""
    cam = model.camera
    if isinstance(test, FeatureSet):
        check_camera(cam, test.camera)
        if test.camera.grid_shape != cam.grid_shape or test.camera.z_max != cam.z_max:
            raise CameraMismatchError(
                f"feature grid {test.camera.grid_shape} does not match model grid {cam.grid_shape}")
        return test, np.zeros(len(test))
    if hasattr(test, "camera"):
        check_camera(cam, test.camera)
    q, k3, k2, two, times = [], [], [], [], []
    for r in test:
        depth = check_depth_maps(r.depth, cam)[0]
        t0 = time.perf_counter()
        q.append(quantize_depth(cam, depth).ravel())
        times.append(time.perf_counter() - t0)
        d = r.dominant
        k3.append(r.keypoints3d[d])
        k2.append(r.keypoints2d[d])
        two.append(r.arm_count == 2)
    n = len(q)
    fs = FeatureSet(cam, np.array(q, dtype=np.intp).reshape(n, cam.nu * cam.nv),
                    np.array(k3, dtype=np.float64).reshape(n, 22, 3),
                    np.array(k2, dtype=np.float64).reshape(n, 22, 2), np.array(two, bool))
    return fs, np.array(times)


def evaluate(model: PoseModel, test, tau_3d: float = 0.10,
             predict: Optional[Callable[[FeatureSet], np.ndarray]] = None,
             config: Optional[dict] = None) -> EvalReport:
    """Score a held-out set.

    ``test`` is a :class:`~egovol.dataset.Dataset`, an iterable of records or
    a :class:`FeatureSet`. Ground-truth classes come from the nearest model
    centroid to each frame's dominant arm. A frame is a detection when the
    predicted class's mean wrist lies within ``tau_3d`` meters (inclusive) of
    the true wrist. ``predict`` replaces the model's scorer (it receives the
    feature set and returns labels); latencies then cover quantization only.
    """
    if tau_3d < 0:
        raise ValueError("tau_3d must be non-negative")
    fs, qtimes = _features(model, test)
    n, k = len(fs), model.k
    truth = nearest_center(cluster_vector(fs.keypoints3d), model.centroids) if n else np.zeros(0, int)
    times = qtimes.copy()
    if predict is None:
        pred = np.empty(n, dtype=np.intp)
        shape = (model.camera.nu, model.camera.nv)
        for i in range(n):
            t0 = time.perf_counter()
            pred[i] = int(np.argmax(score_fast(model, fs.q[i].reshape(shape))))
            times[i] += time.perf_counter() - t0
    else:
        pred = np.asarray(predict(fs), dtype=np.intp)
        if pred.shape != (n,) or (n and (pred.min() < 0 or pred.max() >= k)):
            raise ValueError("predictor returned labels of the wrong shape or range")
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    mk3, mk2 = model.mean_keypoints3d[pred], model.mean_keypoints2d[pred]
    wrist = np.linalg.norm(mk3[:, WRIST] - fs.keypoints3d[:, WRIST], axis=1)
    with np.errstate(invalid="ignore"):
        e3 = np.linalg.norm(mk3 - fs.keypoints3d, axis=-1)
        e2 = np.linalg.norm(mk2 - fs.keypoints2d, axis=-1)
    nanmean = lambda a: float(np.nanmean(a)) if np.any(np.isfinite(a)) else float("nan")
    return EvalReport(
        n=n, k=k, tau_3d=float(tau_3d),
        accuracy=float(np.mean(wrist <= tau_3d)) if n else float("nan"),
        cluster_accuracy=float(np.mean(pred == truth)) if n else float("nan"),
        confusion=confusion,
        mean_error_2d=nanmean(e2), mean_error_3d=nanmean(e3),
        latency_mean=float(times.mean()) if n else float("nan"),
        latency_p95=float(np.percentile(times, 95)) if n else float("nan"),
        config=dict(config or {}))


def bootstrap_interval(hits, n_boot: int = 1000, level: float = 0.95, seed: int = 0):
    """Percentile bootstrap interval for the mean of a 0/1 vector."""
    hits = np.asarray(hits, dtype=float)
    if hits.size == 0:
        return float("nan"), float("nan")
    rng = np.random.default_rng(seed)
    means = hits[rng.integers(0, hits.size, (n_boot, hits.size))].mean(axis=1)
    a = (1 - level) / 2
    return float(np.quantile(means, a)), float(np.quantile(means, 1 - a))


def _parse_grid(value) -> tuple[int, int, int]:
    if isinstance(value, str):
        value = value.lower().replace("x", ",").split(",")
    g = tuple(int(v) for v in value)
    if len(g) != 3:
        raise ValueError(f"grid values need three sizes (nu, nv, nw), got {value!r}")
    return g


def sweep(axis: str, values: Sequence, train, test, *, k: int = 20, lam: float = 1e-4,
          epochs: int = 30, batch_size: int = 32, seed: int = 0, tau_3d: float = 0.10,
          camera: Optional[CameraModel] = None) -> list[dict]:
    """Train and evaluate once per value along ``axis`` with a shared seed.

    ``train`` and ``test`` are re-iterable record sources (datasets or
    lists). For ``train_size`` the first ``n`` training records are used,
    so the subsets are nested. Returns one flat row per value.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if camera is None:
        camera = getattr(train, "camera", None) or CameraModel()
    base = None
    if axis != "grid":
        base = (FeatureSet.from_records(train, camera), FeatureSet.from_records(test, camera))
    rows = []
    for value in values:
        kk, cam = k, camera
        if axis == "grid":
            cam = camera.with_grid(*_parse_grid(value))
            tr, te = FeatureSet.from_records(train, cam), FeatureSet.from_records(test, cam)
            value = "x".join(map(str, cam.grid_shape))
        else:
            tr, te = base
            value = int(value)
            if axis == "k":
                kk = value
            else:
                if not 0 < value <= len(tr):
                    raise ValueError(f"train_size {value} outside [1, {len(tr)}]")
                tr = tr.subset(slice(0, value))
        model, _ = fit_pose_model(tr, kk, lam, epochs, seed, batch_size)
        rep = evaluate(model, te, tau_3d)
        hits = int(np.trace(rep.confusion))
        lo, hi = bootstrap_interval(np.r_[np.ones(hits), np.zeros(rep.n - hits)], seed=seed)
        rows.append({"axis": axis, "value": value, "n_train": len(tr), "n_test": rep.n, "k": kk,
                     "accuracy": rep.accuracy, "cluster_accuracy": rep.cluster_accuracy,
                     "cluster_accuracy_lo": lo, "cluster_accuracy_hi": hi,
                     "mean_error_2d": rep.mean_error_2d, "mean_error_3d": rep.mean_error_3d,
                     "latency_mean": rep.latency_mean, "latency_p95": rep.latency_p95})
    return rows


def write_table(rows: Sequence[dict], path, config: Optional[dict] = None) -> Path:
    """CSV table plus a ``<path>.json`` sidecar holding the config and rows."""
    path = Path(path)
    fields = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps({"config": config or {}, "rows": list(rows)}, indent=2,
                                  sort_keys=True, default=str))
    return sidecar


def bench_throughput(model: PoseModel, frames, min_frames: int = 100) -> dict:
    """Per-frame wall time of quantize + score + argmax over depth maps (no I/O).

    Also reports the lookup count per frame from an operation counter.
    """
    cam = model.camera
    if not isinstance(frames, np.ndarray):
        frames = np.stack([getattr(f, "depth", f) for f in frames])
    frames = check_depth_maps(frames, cam)
    if len(frames) < min_frames:
        raise ValueError(f"need at least {min_frames} frames, got {len(frames)}")
    # warm the cached scoring table outside the timed region
    model.table
    times = np.empty(len(frames))
    lookups = set()
    for i, z in enumerate(frames):
        c = OpCounter()
        t0 = time.perf_counter()
        q = quantize_depth(cam, z)
        np.argmax(score_fast(model, q, c))
        times[i] = time.perf_counter() - t0
        lookups.add(c.lookups)
    if len(lookups) != 1:
        raise RuntimeError("lookup count varied between frames")
    return {"frames": len(frames), "k": model.k, "grid": list(cam.grid_shape),
            "lookups_per_frame": lookups.pop(),
            "latency_mean": float(times.mean()), "latency_p50": float(np.median(times)),
            "latency_p95": float(np.percentile(times, 95)), "latency_max": float(times.max()),
            "fps": float(1.0 / times.mean())}
