import csv
import json
import math

import numpy as np
import pytest

from egovol.camera import CameraModel
from egovol.dataset import Dataset
from egovol.evaluation import (CameraMismatchError, bench_throughput, bootstrap_interval,
                               check_camera, evaluate, sweep, write_table)
from egovol.features import FeatureSet
from egovol.model import PoseModel, cluster_vector, fit_pose_model, load_model, nearest_center


@pytest.fixture(scope="module")
def data(small_run):
    cfg, work, _ = small_run
    train, test = Dataset(work / "train.egov"), Dataset(work / "test.egov")
    model = load_model(work / "model.egom")
    return train, test, model


def oracle_stub(model):
    return lambda fs: nearest_center(cluster_vector(fs.keypoints3d), model.centroids)


def test_ideal_stub_is_perfect(data):
    _, test, model = data
    rep = evaluate(model, test, predict=oracle_stub(model))
    assert rep.cluster_accuracy == 1.0
    assert np.array_equal(np.diag(rep.confusion).sum(), rep.n)


def test_threshold_extremes(data):
    _, test, model = data
    assert evaluate(model, test, math.inf).accuracy == 1.0
    assert evaluate(model, test, 0.0).accuracy == 0.0


def test_confusion_marginals(data):
    _, test, model = data
    rep = evaluate(model, test, 0.1)
    fs = FeatureSet.from_records(test, model.camera)
    truth = nearest_center(cluster_vector(fs.keypoints3d), model.centroids)
    assert np.array_equal(rep.confusion.sum(1), np.bincount(truth, minlength=model.k))
    assert 0 <= rep.accuracy <= 1 and 0 <= rep.cluster_accuracy <= 1
    assert rep.latency_p95 >= 0 and rep.mean_error_3d > 0 and rep.mean_error_2d > 0


def test_evaluation_deterministic(data):
    _, test, model = data
    a, b = evaluate(model, test), evaluate(model, test)
    for key in ("accuracy", "cluster_accuracy", "mean_error_2d", "mean_error_3d"):
        assert getattr(a, key) == getattr(b, key)
    assert np.array_equal(a.confusion, b.confusion)


def test_camera_mismatch(data):
    _, test, model = data
    other = CameraModel(f=250)
    alien = PoseModel(other, model.classes, model.weights, model.biases)
    with pytest.raises(CameraMismatchError):
        evaluate(alien, test)
    check_camera(model.camera, model.camera.with_grid(16, 12, 20))
    fs = FeatureSet.from_records(test, model.camera.with_grid(16, 12, 35))
    with pytest.raises(CameraMismatchError):
        evaluate(model, fs)


def test_singleton_sweep_equals_direct(data):
    train, test, _ = data
    rows = sweep("k", [3], train, test, epochs=3, seed=2)
    fs_tr = FeatureSet.from_records(train, train.camera)
    model, _ = fit_pose_model(fs_tr, 3, epochs=3, seed=2)
    rep = evaluate(model, test)
    assert rows[0]["cluster_accuracy"] == rep.cluster_accuracy
    assert rows[0]["accuracy"] == rep.accuracy


def test_grid_sweep_and_table(data, tmp_path):
    train, test, _ = data
    rows = sweep("grid", ["16x12x20", (32, 24, 35)], train, test, k=3, epochs=2)
    assert [r["value"] for r in rows] == ["16x12x20", "32x24x35"]
    side = write_table(rows, tmp_path / "t.csv", {"axis": "grid"})
    with open(tmp_path / "t.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2
    assert json.loads(side.read_text())["config"] == {"axis": "grid"}
    with pytest.raises(ValueError):
        sweep("grid", [], train, test)
    with pytest.raises(ValueError):
        sweep("bogus", [1], train, test)


def test_train_size_sweep_within_noise(data):
    """More training data should not make things clearly worse (bootstrap band of the smaller run)."""
    train, test, _ = data
    rows = sweep("train_size", [30, 120], train, test, k=4, epochs=5)
    small, full = rows
    assert full["cluster_accuracy"] >= small["cluster_accuracy_lo"]
    assert small["n_train"] == 30 and full["n_train"] == 120


def test_bootstrap_interval():
    lo, hi = bootstrap_interval(np.r_[np.ones(70), np.zeros(30)])
    assert lo < 0.7 < hi and hi - lo < 0.25


def test_bench(data):
    _, test, model = data
    frames = np.stack([r.depth for r in test])
    frames = np.concatenate([frames] * 3)
    stats = bench_throughput(model, frames)
    cam = model.camera
    assert stats["lookups_per_frame"] == cam.nu * cam.nv * model.k
    assert stats["latency_p95"] >= stats["latency_p50"] > 0
    with pytest.raises(ValueError):
        bench_throughput(model, frames[:50])
    double = PoseModel(cam, model.classes * 2, np.concatenate([model.weights] * 2),
                       np.concatenate([model.biases] * 2))
    assert bench_throughput(double, frames)["lookups_per_frame"] == 2 * stats["lookups_per_frame"]
