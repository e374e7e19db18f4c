"""Pose-class quantization and K-way linear scoring over voxel features.

Scoring a backfilled binary grid against a weight tensor ``beta[u, v, w]``
only needs, per column, the sum of the weights behind the first surface.
Precomputing the suffix sums along ``w`` (with a zero plane appended for
the "empty column" sentinel) turns the dense dot product into one lookup
per column and class.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._io import FormatError, read_exact, read_preamble, write_preamble
from ._validation import check_quantized
from .camera import CameraModel
from .features import to_voxels
from .kinematics import CLUSTER_KEYPOINTS, N_KEYPOINTS

MODEL_MAGIC = b"EGOM"
MODEL_VERSION = 1


class NumericError(ArithmeticError):
    """Training or scoring produced non-finite values."""


# --------------------------------------------------------------------------
# K-means

def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a center; take the next unused row
            j = i % n
        else:
            j = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            j = min(j, n - 1)
        centers[i] = X[j]
        d2 = np.minimum(d2, np.sum((X - centers[i]) ** 2, axis=1))
    return centers


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def nearest_center(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum: ties go to the lowest index
    return np.argmin(_sq_dists(X, C), axis=1)


def lloyd(X, k: int, rng: np.random.Generator, max_iter: int = 100):
    """k-means++ seeding followed by Lloyd iterations until assignments stop changing.

    An empty cluster is re-seeded at the point farthest from its current
    center (lowest index on ties). Returns ``(centers, labels, n_iter)``.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    if k > n:
        raise ValueError(f"cannot form {k} clusters from {n} samples")
    if k < 1:
        raise ValueError("k must be >= 1")
    C = kmeans_plusplus(X, k, rng)
    labels = nearest_center(X, C)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        live = counts > 0
        C[live] = sums[live] / counts[live, None]
        if not live.all():
            resid = np.sum((X - C[labels]) ** 2, axis=1)
            for c in np.flatnonzero(~live):
                j = int(np.argmax(resid))
                C[c] = X[j]
                resid[j] = -1.0
        new = nearest_center(X, C)
        if np.array_equal(new, labels) and live.all():
            break
        labels = new
    return C, labels, n_iter


class PoseQuantizer(ClusterMixin, BaseEstimator):
    """K-means over pose vectors (elbow, wrist and knuckle coordinates)."""

    def __init__(self, n_clusters: int = 20, max_iter: int = 100, random_state: int = 0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        rng = np.random.default_rng(self.random_state)
        C, labels, n_iter = lloyd(X, self.n_clusters, rng, self.max_iter)
        self.cluster_centers_ = C
        self.labels_ = labels
        self.n_iter_ = n_iter
        self.inertia_ = float(np.sum((X - C[labels]) ** 2))
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        return nearest_center(check_array(X, dtype=np.float64), self.cluster_centers_)


# --------------------------------------------------------------------------
# one-vs-all linear SVM

def _canonical_order(Q: np.ndarray, y: np.ndarray) -> np.ndarray:
    keys = np.column_stack([Q, y])
    return np.lexsort(keys.T[::-1])


def train_ova(Q, labels, k: int, n_bins: int, lam: float = 1e-4, epochs: int = 30,
              seed: int = 0, batch_size: int = 32, bias_scale: float = 1.0):
    """K independent hinge-loss classifiers on the dense backfilled grids.

    Mini-batch Pegasos (step ``1/(lam*t)``) run for all classes at once.
    The bias is trained as an extra always-on input of size ``bias_scale``
    and returned separately. Samples are first put into a canonical order,
    so the result depends only on the multiset of (features, label) pairs
    and the seed.

    Returns ``(weights (k, columns, n_bins) float32, biases (k,) float32)``.
    """
    Q = check_quantized(Q, n_bins)
    y = np.asarray(labels, dtype=np.intp)
    if len(y) != len(Q):
        raise ValueError("features and labels differ in length")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    empty = np.flatnonzero(np.bincount(y, minlength=k) == 0)
    if len(empty):
        raise ValueError(f"classes without positive examples: {empty.tolist()}")
    if lam <= 0:
        raise ValueError("lam must be positive")
    order = _canonical_order(Q, y)
    Q, y = Q[order], y[order]
    n, cols = Q.shape
    d = cols * n_bins
    rng = np.random.default_rng(seed)
    W = np.zeros((k, d + 1))
    classes = np.arange(k)
    t = 0
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            t += 1
            Xb = np.empty((len(idx), d + 1))
            Xb[:, :d] = to_voxels(Q[idx], n_bins).reshape(len(idx), d)
            Xb[:, d] = bias_scale
            Y = np.where(y[idx, None] == classes[None, :], 1.0, -1.0)
            viol = (Y * (Xb @ W.T)) < 1.0
            eta = 1.0 / (lam * t)
            W *= 1.0 - eta * lam
            W += (eta / len(idx)) * ((viol * Y).T @ Xb)
    if not np.all(np.isfinite(W)):
        raise NumericError("training diverged to non-finite weights")
    weights = W[:, :d].reshape(k, cols, n_bins).astype(np.float32)
    biases = (W[:, d] * bias_scale).astype(np.float32)
    return weights, biases


# --------------------------------------------------------------------------
# cumsum folding and scoring

def fold_weights(beta) -> np.ndarray:
    """Suffix sums along the last (radial) axis plus a zero plane at ``w = nw``.

    ``out[..., w] = sum(beta[..., d] for d >= w)``, accumulated in float64.
    """
    beta = np.asarray(beta, dtype=np.float64)
    out = np.zeros(beta.shape[:-1] + (beta.shape[-1] + 1,))
    out[..., :-1] = np.flip(np.cumsum(np.flip(beta, -1), axis=-1), -1)
    return out


def unfold_weights(beta_prime) -> np.ndarray:
    """Difference along ``w``; exact inverse of :func:`fold_weights`."""
    bp = np.asarray(beta_prime, dtype=np.float64)
    return bp[..., :-1] - bp[..., 1:]


@dataclass(eq=False)
class PoseClass:
    class_id: int
    centroid: np.ndarray
    mean_keypoints3d: np.ndarray
    mean_keypoints2d: np.ndarray
    n_members: int = 0
    two_arm_fraction: float = 0.0


class OpCounter:
    """Counts weight lookups performed by the scorers."""

    def __init__(self):
        self.lookups = 0


@dataclass(eq=False)
class PoseModel:
    camera: CameraModel
    classes: list[PoseClass]
    weights: np.ndarray              # (K, nu, nv, nw) float32
    biases: np.ndarray               # (K,) float32
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32)
        self.biases = np.asarray(self.biases, dtype=np.float32)
        k = len(self.biases)
        if self.weights.shape != (k,) + self.camera.grid_shape:
            raise ValueError(
                f"weights {self.weights.shape} do not match K={k} and grid {self.camera.grid_shape}")
        if len(self.classes) != k:
            raise ValueError("class list length differs from K")
        if not np.all(np.isfinite(self.weights)) or not np.all(np.isfinite(self.biases)):
            raise NumericError("non-finite model weights")

    @property
    def k(self) -> int:
        return len(self.biases)

    @cached_property
    def cumsum(self) -> np.ndarray:
        """(K, nu, nv, nw + 1) float64 suffix-summed weights."""
        return fold_weights(self.weights)

    @cached_property
    def table(self) -> np.ndarray:
        """Lookup layout for scoring: (nu*nv, nw + 1, K), contiguous over classes."""
        k, nu, nv, nw1 = self.cumsum.shape
        return np.ascontiguousarray(self.cumsum.reshape(k, nu * nv, nw1).transpose(1, 2, 0))

    @property
    def mean_keypoints3d(self) -> np.ndarray:
        return np.stack([c.mean_keypoints3d for c in self.classes])

    @property
    def mean_keypoints2d(self) -> np.ndarray:
        return np.stack([c.mean_keypoints2d for c in self.classes])

    @property
    def centroids(self) -> np.ndarray:
        return np.stack([c.centroid for c in self.classes])


def _check_q(model: PoseModel, q) -> np.ndarray:
    cam = model.camera
    q = np.asarray(q)
    if q.shape != (cam.nu, cam.nv):
        raise ValueError(f"quantized map {q.shape} does not match grid ({cam.nu}, {cam.nv})")
    return check_quantized(q.reshape(1, -1), cam.nw)[0]


def score_naive(model: PoseModel, grid) -> np.ndarray:
    """Dense dot product of every class tensor with a binary grid, plus bias."""
    grid = np.asarray(grid)
    if grid.shape != model.camera.grid_shape:
        raise ValueError(f"grid {grid.shape} does not match model grid {model.camera.grid_shape}")
    w = model.weights.reshape(model.k, -1).astype(np.float64)
    return w @ grid.reshape(-1).astype(np.float64) + model.biases.astype(np.float64)


def score_fast(model: PoseModel, q, counter: Optional[OpCounter] = None) -> np.ndarray:
    """Joint feature extraction and scoring from a quantized map (one lookup per column and class)."""
    q = _check_q(model, q)
    rows = model.table[np.arange(q.size), q]          # (nu*nv, K), u-major
    if counter is not None:
        counter.lookups += rows.size
    return rows.sum(axis=0) + model.biases.astype(np.float64)


def score_loops(model: PoseModel, q, counter: Optional[OpCounter] = None) -> np.ndarray:
    """The same computation written as explicit u, v, k loops."""
    q = _check_q(model, q).reshape(model.camera.nu, model.camera.nv)
    bp = model.cumsum
    score = [0.0] * model.k
    lookups = 0
    for u in range(model.camera.nu):
        for v in range(model.camera.nv):
            w = q[u, v]
            for k in range(model.k):
                score[k] += bp[k, u, v, w]
                lookups += 1
    if counter is not None:
        counter.lookups += lookups
    return np.asarray(score) + model.biases.astype(np.float64)


def score_batch(model: PoseModel, Q, chunk: int = 64) -> np.ndarray:
    """Scores for many quantized maps, ``(n, nu*nv)`` or ``(n, nu, nv)`` -> ``(n, K)``."""
    Q = check_quantized(Q, model.camera.nw, model.camera.nu * model.camera.nv)
    out = np.empty((len(Q), model.k))
    cols = np.arange(Q.shape[1])
    for s in range(0, len(Q), chunk):
        out[s:s + chunk] = model.table[cols[None, :], Q[s:s + chunk]].sum(axis=1)
    return out + model.biases.astype(np.float64)


def classify(model: PoseModel, q):
    """Argmax class (lowest id on ties), its score, and its mean 3D/2D keypoints."""
    s = score_fast(model, q)
    k = int(np.argmax(s))
    c = model.classes[k]
    return k, float(s[k]), c.mean_keypoints3d, c.mean_keypoints2d


def top_classes(model: PoseModel, q, n: int = 1) -> list[tuple[int, float]]:
    s = score_fast(model, q)
    order = np.lexsort((np.arange(model.k), -s))[:n]
    return [(int(i), float(s[i])) for i in order]


# --------------------------------------------------------------------------
# estimator

class EgoPoseClassifier(ClassifierMixin, BaseEstimator):
    """One-vs-all linear SVM over backfilled voxel grids.

    ``X`` holds quantized depth maps as rows of ``nu*nv`` bin indices in
    ``[0, n_bins]``; labels must be ``0..K-1`` with every class present.
    """

    def __init__(self, n_bins: int = 35, lam: float = 1e-4, epochs: int = 30,
                 batch_size: int = 32, random_state: int = 0):
        self.n_bins = n_bins
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X = check_quantized(X, self.n_bins)
        y = np.asarray(y, dtype=np.intp)
        k = int(y.max()) + 1 if y.size else 0
        self.coef_, self.intercept_ = train_ova(
            X, y, k, self.n_bins, self.lam, self.epochs, self.random_state, self.batch_size)
        self.classes_ = np.arange(k)
        self.n_features_in_ = X.shape[1]
        self.cumsum_ = np.ascontiguousarray(fold_weights(self.coef_).transpose(1, 2, 0))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_quantized(X, self.n_bins, self.n_features_in_)
        cols = np.arange(X.shape[1])
        out = np.empty((len(X), len(self.classes_)))
        for s in range(0, len(X), 64):
            out[s:s + 64] = self.cumsum_[cols[None, :], X[s:s + 64]].sum(axis=1)
        return out + self.intercept_.astype(np.float64)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


# --------------------------------------------------------------------------
# cluster bookkeeping

def cluster_vector(keypoints3d) -> np.ndarray:
    """Concatenated elbow, wrist and knuckle coordinates (21 numbers) of one arm."""
    kp = np.asarray(keypoints3d, dtype=np.float64)
    return kp[..., list(CLUSTER_KEYPOINTS), :].reshape(kp.shape[:-2] + (-1,))


def summarize_classes(centroids, labels, keypoints3d, keypoints2d, two_arm=None) -> list[PoseClass]:
    """Per-class mean keypoints of the dominant arm."""
    labels = np.asarray(labels)
    k = len(centroids)
    two_arm = np.zeros(len(labels), bool) if two_arm is None else np.asarray(two_arm, bool)
    out = []
    for c in range(k):
        m = labels == c
        if m.any():
            kp3 = np.asarray(keypoints3d, dtype=np.float64)[m].mean(0)
            with np.errstate(invalid="ignore"):
                kp2 = np.nanmean(np.asarray(keypoints2d, dtype=np.float64)[m], axis=0) \
                    if np.any(~np.isnan(np.asarray(keypoints2d)[m])) else np.full((N_KEYPOINTS, 2), np.nan)
            frac = float(two_arm[m].mean())
        else:
            kp3 = np.full((N_KEYPOINTS, 3), np.nan)
            kp2 = np.full((N_KEYPOINTS, 2), np.nan)
            frac = 0.0
        out.append(PoseClass(c, np.asarray(centroids[c], dtype=np.float64), kp3, kp2, int(m.sum()), frac))
    return out


def cluster_poses(records, k: int, rng=0, max_iter: int = 100):
    """Cluster exemplar records on the dominant arm. Returns ``(classes, labels)``."""
    recs = list(records)
    kp3 = np.stack([r.keypoints3d[r.dominant] for r in recs]).astype(np.float64)
    kp2 = np.stack([r.keypoints2d[r.dominant] for r in recs]).astype(np.float64)
    two = np.array([r.arm_count == 2 for r in recs])
    seed = rng if isinstance(rng, (int, np.integer)) else int(rng.integers(2 ** 63))
    qz = PoseQuantizer(k, max_iter, seed).fit(cluster_vector(kp3))
    return summarize_classes(qz.cluster_centers_, qz.labels_, kp3, kp2, two), qz.labels_


def fit_classes(train, k: int, seed: int = 0, max_iter: int = 100):
    """K-means pose classes for a :class:`~egovol.features.FeatureSet`.

    Returns ``(classes, labels, n_iter)``.
    """
    qz = PoseQuantizer(k, max_iter, seed).fit(cluster_vector(train.keypoints3d))
    classes = summarize_classes(qz.cluster_centers_, qz.labels_, train.keypoints3d,
                                train.keypoints2d, train.two_arm)
    return classes, qz.labels_, qz.n_iter_


def train_pose_model(train, classes: Sequence[PoseClass], labels, lam: float = 1e-4,
                     epochs: int = 30, seed: int = 0, batch_size: int = 32,
                     metadata: Optional[dict] = None) -> PoseModel:
    """Train the K scorers on given class labels and fold them into a :class:`PoseModel`."""
    cam = train.camera
    k = len(classes)
    clf = EgoPoseClassifier(cam.nw, lam, epochs, batch_size, seed).fit(train.q, labels)
    if len(clf.classes_) != k:
        raise ValueError(f"labels cover {len(clf.classes_)} classes, expected {k}")
    meta = {"lam": lam, "epochs": epochs, "seed": seed, "batch_size": batch_size,
            "n_train": len(train)}
    meta.update(metadata or {})
    weights = clf.coef_.reshape((k,) + cam.grid_shape)
    return PoseModel(cam, list(classes), weights, clf.intercept_, meta)


def fit_pose_model(train, k: int, lam: float = 1e-4, epochs: int = 30, seed: int = 0,
                   batch_size: int = 32, max_iter: int = 100) -> tuple[PoseModel, np.ndarray]:
    """Cluster a :class:`~egovol.features.FeatureSet` into ``k`` pose classes and train the scorer.

    Returns the model and the training labels.
    """
    classes, labels, n_iter = fit_classes(train, k, seed, max_iter)
    model = train_pose_model(train, classes, labels, lam, epochs, seed, batch_size,
                             {"kmeans_iterations": n_iter})
    return model, labels


# --------------------------------------------------------------------------
# cluster files (JSON)

def save_classes(path, classes: Sequence[PoseClass], labels, extra: Optional[dict] = None) -> None:
    doc = {"k": len(classes), "labels": np.asarray(labels).astype(int).tolist(),
           "classes": [{"centroid": c.centroid.tolist(),
                        "mean_keypoints3d": c.mean_keypoints3d.tolist(),
                        "mean_keypoints2d": np.where(np.isnan(c.mean_keypoints2d), None,
                                                     c.mean_keypoints2d).tolist(),
                        "n_members": c.n_members, "two_arm_fraction": c.two_arm_fraction}
                       for c in classes]}
    doc.update(extra or {})
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_classes(path) -> tuple[list[PoseClass], np.ndarray, dict]:
    """Returns ``(classes, labels, document)``."""
    try:
        doc = json.loads(Path(path).read_text())
        classes = [PoseClass(i, np.array(c["centroid"], float),
                             np.array(c["mean_keypoints3d"], float),
                             np.array(c["mean_keypoints2d"], dtype=float),
                             int(c["n_members"]), float(c["two_arm_fraction"]))
                   for i, c in enumerate(doc["classes"])]
        labels = np.array(doc["labels"], dtype=np.intp)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"invalid cluster file {path}: {e}") from None
    return classes, labels, doc


# --------------------------------------------------------------------------
# model files

def save_model(model: PoseModel, path, extra_header: Optional[dict] = None) -> None:
    """Write an EGOM file.

    Layout after the preamble: per class ``f32 centroid[21]``,
    ``f32 mean_kp3d[22][3]``, ``f32 mean_kp2d[22][2]``, ``f32 bias``,
    ``f32 beta[nu][nv][nw]``, ``f32 beta_prime[nu][nv][nw+1]``.
    """
    header = {
        "camera": model.camera.to_dict(),
        "k": model.k,
        "metadata": model.metadata,
        "classes": [{"n_members": c.n_members, "two_arm_fraction": c.two_arm_fraction}
                    for c in model.classes],
    }
    if extra_header:
        header.update(extra_header)
    bp = model.cumsum.astype(np.float32)
    with open(path, "wb") as fh:
        write_preamble(fh, MODEL_MAGIC, MODEL_VERSION, header)
        for i, c in enumerate(model.classes):
            fh.write(np.asarray(c.centroid, "<f4").tobytes())
            fh.write(np.asarray(c.mean_keypoints3d, "<f4").tobytes())
            fh.write(np.asarray(c.mean_keypoints2d, "<f4").tobytes())
            fh.write(struct.pack("<f", float(model.biases[i])))
            fh.write(np.ascontiguousarray(model.weights[i], "<f4").tobytes())
            fh.write(np.ascontiguousarray(bp[i], "<f4").tobytes())


def read_model_header(path) -> dict:
    with open(path, "rb") as fh:
        return read_preamble(fh, MODEL_MAGIC, MODEL_VERSION)


def load_model(path) -> PoseModel:
    with open(path, "rb") as fh:
        header = read_preamble(fh, MODEL_MAGIC, MODEL_VERSION)
        try:
            cam = CameraModel.from_dict(header["camera"])
            k = int(header["k"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"invalid model header: {e}") from None
        nu, nv, nw = cam.grid_shape
        dim = len(CLUSTER_KEYPOINTS) * 3
        meta = header.get("classes", [{}] * k)

        def f32(n):
            return np.frombuffer(read_exact(fh, 4 * n), "<f4").astype(np.float32)

        classes, weights, biases, stored_bp = [], [], [], []
        for i in range(k):
            centroid = f32(dim).astype(np.float64)
            kp3 = f32(N_KEYPOINTS * 3).reshape(N_KEYPOINTS, 3).astype(np.float64)
            kp2 = f32(N_KEYPOINTS * 2).reshape(N_KEYPOINTS, 2).astype(np.float64)
            biases.append(f32(1)[0])
            weights.append(f32(nu * nv * nw).reshape(nu, nv, nw))
            stored_bp.append(f32(nu * nv * (nw + 1)).reshape(nu, nv, nw + 1))
            m = meta[i] if i < len(meta) else {}
            classes.append(PoseClass(i, centroid, kp3, kp2, int(m.get("n_members", 0)),
                                     float(m.get("two_arm_fraction", 0.0))))
        if fh.read(1):
            raise FormatError("trailing bytes after the last class")
    model = PoseModel(cam, classes, np.stack(weights) if k else np.zeros((0, nu, nv, nw)),
                      np.array(biases, np.float32), header.get("metadata", {}))
    if k and not np.array_equal(model.cumsum.astype(np.float32), np.stack(stored_bp)):
        raise FormatError("stored cumulative weights do not match the stored weights")
    return model
