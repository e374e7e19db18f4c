"""Egocentric arm and hand pose recognition from depth with perspective-aware voxel features."""
from .camera import CameraModel
from .dataset import Dataset, DatasetWriter
from .evaluation import EvalReport, bench_throughput, evaluate, sweep
from .features import (FeatureSet, OrthographicVoxelizer, PerspectiveVoxelizer, orthographic_voxels,
                       quantize_depth, to_voxels)
from .kinematics import ArmHandPose, build_arm_chain, forward_kinematics, load_grasps
from .model import (EgoPoseClassifier, PoseModel, PoseQuantizer, fit_pose_model, fold_weights,
                    load_model, save_model, score_fast, score_naive)
from .synthesis import SynthesisConfig, Synthesizer, generate_dataset, raycast_depth

__version__ = "0.1.0"

__all__ = [
    "CameraModel", "Dataset", "DatasetWriter", "EvalReport", "bench_throughput", "evaluate",
    "sweep", "FeatureSet", "OrthographicVoxelizer", "PerspectiveVoxelizer", "orthographic_voxels",
    "quantize_depth", "to_voxels", "ArmHandPose", "build_arm_chain", "forward_kinematics",
    "load_grasps", "EgoPoseClassifier", "PoseModel", "PoseQuantizer", "fit_pose_model",
    "fold_weights", "load_model", "save_model", "score_fast", "score_naive", "SynthesisConfig",
    "Synthesizer", "generate_dataset", "raycast_depth",
]
