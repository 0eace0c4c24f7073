"""splatmap: CPU Gaussian-splatting mapping backend with voxel-PCA priors,
cascaded initialization, masked splat optimization, Gaussian-GICP loop
closure, and pose-graph correction."""

__version__ = "0.1.0"

from .config import Config, config_from_dict, config_to_dict, load_config, save_config
from .geom import Camera, Pose, se3_exp, se3_log, umeyama_align
from .primitives import Gaussian, GaussianCloud, Source
from .render import RenderConfig, RenderOutput, render, render_backward
from .losses import LossWeights, compute_losses, interior_mask
from .map_opt import GlobalMap, MapConfig, load_map_ply, save_map_ply
from .loop_graph import LoopConfig, gaussian_gicp, optimize_pose_graph
from .pipeline import run
from .synth import Dataset, SynthConfig, generate_dataset
from .voxel_pca import PointCloud, VoxelMap

__all__ = [
    "Camera", "Config", "Dataset", "Gaussian", "GaussianCloud", "GlobalMap",
    "LoopConfig", "LossWeights", "MapConfig", "PointCloud", "Pose",
    "RenderConfig", "RenderOutput", "Source", "SynthConfig", "VoxelMap",
    "compute_losses", "config_from_dict", "config_to_dict", "gaussian_gicp",
    "generate_dataset", "interior_mask", "load_config", "load_map_ply",
    "optimize_pose_graph", "render", "render_backward", "run", "save_config",
    "save_map_ply", "se3_exp", "se3_log", "umeyama_align",
]
