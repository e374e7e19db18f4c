"""``egovol`` command line: generate, cluster, train, classify, eval, sweep, bench, dump, features, run."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .camera import CameraModel
from .config import ConfigError, RunConfig
from .dataset import Dataset
from .evaluation import CameraMismatchError, bench_throughput, evaluate, sweep, write_table
from .features import FeatureSet, quantize_depth, to_voxels
from .model import (fit_classes, load_classes, load_model, save_classes, save_model,
                    score_fast, train_pose_model)
from .pipeline import StageError, run_pipeline
from .synthesis import NO_MEASUREMENT, generate_dataset
from ._io import FormatError, read_pgm, write_pgm

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4
PGM_MAX = 65535

log = logging.getLogger("egovol")


# --------------------------------------------------------------------------
# depth <-> 16-bit PGM

def depth_to_pgm(depth, z_max: float) -> np.ndarray:
    """Meters to 16-bit gray: ``z_max`` maps to 65535, no measurement to 0.

    Measured pixels never map to 0 and depths beyond ``z_max`` saturate.
    """
    d = np.asarray(depth, dtype=np.float64)
    v = np.clip(np.rint(d / z_max * PGM_MAX), 1, PGM_MAX)
    return np.where(d == NO_MEASUREMENT, 0, v).astype(np.uint16)


def pgm_to_depth(values, z_max: float, maxval: int = PGM_MAX) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return (v * z_max / maxval).astype(np.float32)


def dump_frame(dataset: Dataset, index: int, out_prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.pgm`` (depth) and ``<prefix>.json`` (keypoints) for one record."""
    rec = dataset[index]
    cam = dataset.camera
    pgm, js = Path(f"{out_prefix}.pgm"), Path(f"{out_prefix}.json")
    write_pgm(pgm, depth_to_pgm(rec.depth, cam.z_max), PGM_MAX)

    def clean(a):
        return np.where(np.isfinite(a), a, None).tolist()

    js.write_text(json.dumps({
        "index": index, "seed": rec.seed, "z_max": cam.z_max, "pgm_maxval": PGM_MAX,
        "arms": [{"handedness": h, "grasp_id": g, "keypoints3d": clean(rec.keypoints3d[i]),
                  "keypoints2d": clean(rec.keypoints2d[i])}
                 for i, (h, g) in enumerate(zip(rec.handedness, rec.grasp_ids))],
    }, indent=2))
    return pgm, js


def dump_features(cam: CameraModel, depth, out_prefix) -> tuple[Path, Path]:
    """``<prefix>.pgm``: z' as gray (u across, v down, maxval nw); ``<prefix>.voxels.txt``: occupied ``u v w``."""
    q = quantize_depth(cam, depth)
    pgm, txt = Path(f"{out_prefix}.pgm"), Path(f"{out_prefix}.voxels.txt")
    write_pgm(pgm, q.T, cam.nw)
    u, v, w = np.nonzero(to_voxels(q, cam.nw))
    with open(txt, "w") as fh:
        fh.write(f"# grid {cam.nu} {cam.nv} {cam.nw}; occupied voxels (u v w): {len(u)}\n")
        for row in zip(u, v, w):
            fh.write("%d %d %d\n" % row)
    return pgm, txt


# --------------------------------------------------------------------------
# helpers

def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("EGOVOL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"EGOVOL_THREADS must be an integer, got {env!r}") from None
    return 1


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig(seed=0)
    over = {
        "seed": getattr(args, "seed", None),
        "synthesis.sigma": getattr(args, "sigma", None),
        "synthesis.pair_rate": getattr(args, "pair_rate", None),
        "synthesis.delta": getattr(args, "delta", None),
        "synthesis.n_grasps": getattr(args, "n_grasps", None),
        "synthesis.grasps_path": getattr(args, "grasps", None),
        "synthesis.noise_std": getattr(args, "noise_std", None),
        "model.k": getattr(args, "k", None),
        "model.lam": getattr(args, "lam", None),
        "model.epochs": getattr(args, "epochs", None),
        "model.batch_size": getattr(args, "batch_size", None),
        "eval.tau_3d": getattr(args, "tau3d", None),
    }
    if getattr(args, "no_backgrounds", False):
        over["synthesis.backgrounds"] = False
    grid = getattr(args, "grid", None)
    if grid:
        nu, nv, nw = _grid(grid)
        over.update({"camera.nu": nu, "camera.nv": nv, "camera.nw": nw})
    return cfg.override(**over)


def _grid(text: str) -> tuple[int, int, int]:
    try:
        g = tuple(int(x) for x in text.lower().split("x"))
    except ValueError:
        g = ()
    if len(g) != 3:
        raise ConfigError(f"grid must look like 32x24x35, got {text!r}")
    return g


def _load_frames(path: str, cam: CameraModel, index=None) -> tuple[list, np.ndarray]:
    """Depth frames from a dataset, ``.npy`` array or 16-bit depth PGM."""
    p = Path(path)
    if p.suffix == ".npy":
        arr = np.load(p)
        arr = arr[None] if arr.ndim == 2 else arr
        ids = list(range(len(arr)))
    elif p.suffix == ".pgm":
        img, maxval = read_pgm(p)
        # saturated pixels were at or beyond z_max; keep them outside the workspace
        arr = np.where(img == maxval, np.inf, pgm_to_depth(img, cam.z_max, maxval))[None]
        ids = [0]
    else:
        ds = Dataset(p)
        if index is not None:
            return [index], ds[index].depth[None]
        ids, frames = [], []
        for i, r in enumerate(ds):
            ids.append(i)
            frames.append(r.depth)
        return ids, np.stack(frames) if frames else np.zeros((0, cam.height, cam.width))
    if index is not None:
        if not 0 <= index < len(arr):
            raise IndexError(f"frame {index} out of range ({len(arr)} frames)")
        return [index], arr[index:index + 1]
    return ids, arr


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


# --------------------------------------------------------------------------
# subcommands

def cmd_generate(args) -> None:
    cfg = _config(args)
    if args.n is not None:
        cfg = cfg.override(**{f"synthesis.n_{args.split}": args.n})
    header = generate_dataset(cfg.camera_model(), cfg.synthesis_config(args.split), args.out,
                              _threads(args), {"stage_hash": cfg.stage_hash(args.split)})
    print(f"wrote {cfg.synthesis_config(args.split).n} records to {args.out} "
          f"(config {header['config_hash']})")


def cmd_cluster(args) -> None:
    ds = Dataset(args.data)
    fs = FeatureSet.from_records(ds, ds.camera)
    classes, labels, n_iter = fit_classes(fs, args.k, args.seed, args.max_iter)
    save_classes(args.out, classes, labels, {"dataset_config_hash": ds.config_hash,
                                             "seed": args.seed, "kmeans_iterations": n_iter})
    sizes = ", ".join(str(c.n_members) for c in classes)
    print(f"{args.k} classes from {len(fs)} exemplars ({n_iter} iterations); sizes: {sizes}")


def cmd_train(args) -> None:
    ds = Dataset(args.data)
    cam = ds.camera.with_grid(*_grid(args.grid)) if args.grid else ds.camera
    fs = FeatureSet.from_records(ds, cam)
    if args.clusters:
        classes, labels, doc = load_classes(args.clusters)
        if len(labels) != len(fs):
            raise FormatError(f"cluster file labels {len(labels)} exemplars, dataset has {len(fs)}")
        n_iter = doc.get("kmeans_iterations")
    else:
        if args.k is None:
            raise ConfigError("train needs --clusters or --k")
        classes, labels, n_iter = fit_classes(fs, args.k, args.seed)
    model = train_pose_model(fs, classes, labels, args.lam, args.epochs, args.seed,
                             args.batch_size, {"kmeans_iterations": n_iter})
    save_model(model, args.out, {"dataset_config_hash": ds.config_hash})
    print(f"trained K={model.k} on {len(fs)} exemplars, grid {cam.grid_shape}; wrote {args.out}")


def cmd_classify(args) -> None:
    model = load_model(args.model)
    ids, frames = _load_frames(args.input, model.camera, args.index)
    out = []
    for i, z in zip(ids, frames):
        s = score_fast(model, quantize_depth(model.camera, z))
        order = np.lexsort((np.arange(model.k), -s))[:args.top]
        best = model.classes[order[0]]
        out.append({"frame": i, "top": [{"class": int(c), "score": float(s[c])} for c in order],
                    "keypoints3d": best.mean_keypoints3d.tolist(),
                    "keypoints2d": np.where(np.isnan(best.mean_keypoints2d), None,
                                            best.mean_keypoints2d).tolist()})
    if args.json:
        _print_json(out)
        return
    for r in out:
        ranked = "  ".join(f"{t['class']}:{t['score']:.4f}" for t in r["top"])
        print(f"{r['frame']}\t{ranked}")


def cmd_eval(args) -> None:
    model = load_model(args.model)
    rep = evaluate(model, Dataset(args.test), args.tau3d,
                   config={"model": args.model, "test": args.test, "tau_3d": args.tau3d})
    summary = rep.summary()
    if args.csv:
        write_table([{k: v for k, v in summary.items() if k != "config"}], args.csv, rep.config)
    if args.json:
        Path(args.json).write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    print(f"frames {rep.n}  K {rep.k}\n"
          f"wrist detection (tau {rep.tau_3d:g} m): {rep.accuracy:.4f}\n"
          f"exact cluster accuracy:       {rep.cluster_accuracy:.4f}\n"
          f"mean keypoint error: {rep.mean_error_3d * 100:.2f} cm, {rep.mean_error_2d:.2f} px\n"
          f"latency: mean {rep.latency_mean * 1e3:.3f} ms, p95 {rep.latency_p95 * 1e3:.3f} ms")


def cmd_sweep(args) -> None:
    values = [v for v in args.values.split(",") if v]
    train, test = Dataset(args.train), Dataset(args.test)
    rows = sweep(args.axis, values, train, test, k=args.k, lam=args.lam, epochs=args.epochs,
                 batch_size=args.batch_size, seed=args.seed, tau_3d=args.tau3d)
    write_table(rows, args.out, {"axis": args.axis, "values": values, "train": args.train,
                                 "test": args.test, "k": args.k, "lam": args.lam,
                                 "epochs": args.epochs, "batch_size": args.batch_size,
                                 "seed": args.seed, "tau_3d": args.tau3d})
    for r in rows:
        print(f"{args.axis}={r['value']}\tcluster {r['cluster_accuracy']:.4f}"
              f" [{r['cluster_accuracy_lo']:.4f}, {r['cluster_accuracy_hi']:.4f}]"
              f"\twrist {r['accuracy']:.4f}")
    print(f"wrote {args.out}")


def cmd_bench(args) -> None:
    model = load_model(args.model)
    _, frames = _load_frames(args.data, model.camera)
    if len(frames) == 0:
        raise FormatError("no frames to benchmark")
    reps = -(-args.frames // len(frames))
    frames = np.concatenate([frames] * reps)[:args.frames]
    stats = bench_throughput(model, frames)
    if args.json:
        _print_json(stats)
        return
    print(f"K {stats['k']}  grid {'x'.join(map(str, stats['grid']))}  frames {stats['frames']}\n"
          f"lookups/frame {stats['lookups_per_frame']}\n"
          f"latency mean {stats['latency_mean'] * 1e3:.3f} ms  p50 {stats['latency_p50'] * 1e3:.3f} ms"
          f"  p95 {stats['latency_p95'] * 1e3:.3f} ms  ({stats['fps']:.0f} fps)")


def cmd_dump(args) -> None:
    pgm, js = dump_frame(Dataset(args.data), args.index, args.out)
    print(f"wrote {pgm} and {js}")


def cmd_features(args) -> None:
    ds = Dataset(args.data)
    cam = ds.camera.with_grid(*_grid(args.grid)) if args.grid else ds.camera
    q = quantize_depth(cam, ds[args.index].depth)
    if args.dump:
        pgm, txt = dump_features(cam, ds[args.index].depth, args.dump)
        print(f"wrote {pgm} and {txt}")
    occupied = int(np.sum(cam.nw - q))
    empty = int(np.sum(q == cam.nw))
    print(f"grid {cam.nu}x{cam.nv}x{cam.nw}: {occupied} occupied voxels, "
          f"{empty} of {cam.nu * cam.nv} columns empty")


def cmd_run(args) -> None:
    cfg = _config(args)
    workdir = args.workdir or (Path(args.config).parent if args.config else Path("."))
    status = run_pipeline(cfg, workdir, _threads(args), args.force)
    for stage, state in status.items():
        if stage != "paths":
            print(f"{stage:15s} {state}")
    report = json.loads(Path(status["paths"]["report"]).read_text())
    print(f"wrist detection {report['accuracy']:.4f}, exact cluster {report['cluster_accuracy']:.4f}")


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egovol", description=__doc__.split(":")[0])
    p.add_argument("--threads", type=int, help="worker cap (default: $EGOVOL_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def synth_flags(sp):
        sp.add_argument("--config", help="JSON run config; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--sigma", type=float)
        sp.add_argument("--pair-rate", type=float)
        sp.add_argument("--delta", type=float)
        sp.add_argument("--n-grasps", type=int)
        sp.add_argument("--grasps", help="grasp library JSON replacing the shipped one")
        sp.add_argument("--noise-std", type=float)
        sp.add_argument("--no-backgrounds", action="store_true")
        sp.add_argument("--grid", help="feature grid, e.g. 32x24x35")

    def train_flags(sp):
        sp.add_argument("--lam", "--lambda", dest="lam", type=float, default=1e-4)
        sp.add_argument("--epochs", type=int, default=30)
        sp.add_argument("--batch-size", type=int, default=32)
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("generate", help="synthesize a dataset")
    synth_flags(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--split", choices=("train", "test"), default="train",
                    help="which seed range of the config to draw from")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("cluster", help="K-means pose classes")
    sp.add_argument("--data", required=True)
    sp.add_argument("--k", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-iter", type=int, default=100)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("train", help="train and fold the K-way scorer")
    sp.add_argument("--data", "--dataset", dest="data", required=True)
    sp.add_argument("--clusters")
    sp.add_argument("--k", type=int)
    sp.add_argument("--grid")
    train_flags(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("classify", help="classify depth frames")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True, help="dataset, .npy depth array or 16-bit depth .pgm")
    sp.add_argument("--index", type=int)
    sp.add_argument("--top", type=int, default=1)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_classify)

    sp = sub.add_parser("eval", help="evaluate a model on a test dataset")
    sp.add_argument("--model", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--tau3d", type=float, default=0.10)
    sp.add_argument("--csv")
    sp.add_argument("--json")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="ablation over K, grid or training size")
    sp.add_argument("--axis", choices=("k", "grid", "train_size"), required=True)
    sp.add_argument("--values", required=True, help="comma separated, grids as 32x24x35")
    sp.add_argument("--train", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--k", type=int, default=20)
    sp.add_argument("--tau3d", type=float, default=0.10)
    train_flags(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("bench", help="scoring throughput")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True, help="dataset, .npy or .pgm frames (cycled)")
    sp.add_argument("--frames", type=int, default=1000)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("dump", help="write one record as PGM + keypoint JSON")
    sp.add_argument("--data", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--out", required=True, help="output prefix")
    sp.set_defaults(func=cmd_dump)

    sp = sub.add_parser("features", help="inspect the voxel feature of one record")
    sp.add_argument("--data", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--grid")
    sp.add_argument("--dump", metavar="PREFIX")
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("run", help="generate, cluster, train and evaluate from a config")
    synth_flags(sp)
    sp.add_argument("--k", type=int)
    sp.add_argument("--lam", "--lambda", dest="lam", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--tau3d", type=float)
    sp.add_argument("--workdir")
    sp.add_argument("--force", action="store_true", help="rebuild every stage")
    sp.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as e:
        print(f"egovol: {e}", file=sys.stderr)
        return _code(e.cause) or 1
    except Exception as e:
        code = _code(e)
        if code is None:
            raise
        print(f"egovol: {e}", file=sys.stderr)
        return code
    return EXIT_OK


def _code(e: BaseException):
    if isinstance(e, FormatError):
        return EXIT_FORMAT
    if isinstance(e, ArithmeticError):
        return EXIT_NUMERIC
    if isinstance(e, (ConfigError, CameraMismatchError, ValueError, IndexError,
                      FileNotFoundError, IsADirectoryError)):
        return EXIT_CONFIG
    return None


if __name__ == "__main__":
    sys.exit(main())
