"""End-to-end run: generate -> cluster -> train/fold -> evaluate, with hash-based skipping."""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Callable, Optional

from .config import RunConfig
from .dataset import Dataset
from .evaluation import evaluate
from .features import FeatureSet
from .model import (fit_classes, load_classes, load_model, read_model_header, save_classes,
                    save_model, train_pose_model)
from .synthesis import generate_dataset
from ._io import FormatError

log = logging.getLogger("egovol")

STAGES = ("generate-train", "generate-test", "cluster", "train", "evaluate")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _write_atomic(path: Path, writer: Callable[[Path], None]) -> None:
    """Write through ``<path>.partial``; the partial file is kept if the writer fails."""
    tmp = path.with_name(path.name + ".partial")
    writer(tmp)
    os.replace(tmp, path)


def _stored_hash(kind: str, path: Path) -> Optional[str]:
    if not path.exists():
        return None
    try:
        if kind == "dataset":
            return Dataset(path).header.get("stage_hash")
        if kind == "model":
            return read_model_header(path).get("stage_hash")
        return json.loads(path.read_text()).get("stage_hash")
    except (FormatError, OSError, ValueError):
        return None


def run_pipeline(cfg: RunConfig, workdir=".", threads: int = 1, force: bool = False) -> dict:
    """Run every stage whose artifact is missing or was built from a different config.

    Returns ``{stage: "built" | "skipped"}`` plus the artifact paths.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cam = cfg.camera_model()
    path = {k: cfg.resolve(k, workdir) for k in cfg.paths}
    status: dict = {}

    def stage(name: str, key: str, kind: str, build: Callable[[str], None]) -> None:
        h = cfg.stage_hash(key)
        if not force and _stored_hash(kind, path[key]) == h:
            log.info("%s: up to date (%s)", name, path[key])
            status[name] = "skipped"
            return
        log.info("%s: building %s", name, path[key])
        try:
            build(h)
        except Exception as e:
            raise StageError(name, e) from e
        status[name] = "built"

    def gen(split):
        def build(h):
            _write_atomic(path[split], lambda p: generate_dataset(
                cam, cfg.synthesis_config(split), p, threads, {"stage_hash": h}))
        return build

    stage("generate-train", "train", "dataset", gen("train"))
    stage("generate-test", "test", "dataset", gen("test"))

    train_fs = None

    def train_features():
        nonlocal train_fs
        if train_fs is None:
            train_fs = FeatureSet.from_records(Dataset(path["train"]), cam)
        return train_fs

    def cluster(h):
        classes, labels, n_iter = fit_classes(train_features(), int(cfg.model["k"]), cfg.seed,
                                              int(cfg.model["max_iter"]))
        _write_atomic(path["clusters"], lambda p: save_classes(
            p, classes, labels, {"stage_hash": h, "kmeans_iterations": n_iter}))

    def train(h):
        classes, labels, doc = load_classes(path["clusters"])
        m = cfg.model
        model = train_pose_model(train_features(), classes, labels, m["lam"], int(m["epochs"]),
                                 cfg.seed, int(m["batch_size"]),
                                 {"kmeans_iterations": doc.get("kmeans_iterations")})
        _write_atomic(path["model"], lambda p: save_model(
            model, p, {"stage_hash": h, "config": cfg.to_dict()}))

    def report(h):
        rep = evaluate(load_model(path["model"]), Dataset(path["test"]), cfg.eval["tau_3d"],
                       config=cfg.to_dict())
        doc = rep.to_dict()
        doc["stage_hash"] = h
        _write_atomic(path["report"], lambda p: p.write_text(json.dumps(doc, indent=2, sort_keys=True)))

    stage("cluster", "clusters", "json", cluster)
    stage("train", "model", "model", train)
    stage("evaluate", "report", "json", report)
    status["paths"] = {k: str(v) for k, v in path.items()}
    return status
