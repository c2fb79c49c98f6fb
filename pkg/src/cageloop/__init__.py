"""Caging loops and grasp poses for point clouds."""

from .errors import CageLoopError, EmptyResult, StageError
from .estimators import CagingGraspPlanner, PrincipalCurvatures, RBFOffsetSurface
from .field import DistanceField, compute_field
from .grid import Label, VoxelGrid, build_grid
from .implicit import ImplicitSurface, fit_rbf
from .morse import CagingLoop, CriticalPoint, Kind, find_critical_points, trace_loop
from .pipeline import PipelineConfig, RunReport, run, validate
from .pose import GraspPose, GripperSpec, make_pose
from .refine import dedup, rank, relax_loop
from .shapes import PointCloud, generate_shape, load_shape, save_points

__version__ = "0.1.0"

__all__ = [
    "CageLoopError", "EmptyResult", "StageError", "CagingGraspPlanner", "PrincipalCurvatures", "RBFOffsetSurface",
    "DistanceField", "compute_field", "Label", "VoxelGrid", "build_grid", "ImplicitSurface", "fit_rbf",
    "CagingLoop", "CriticalPoint", "Kind", "find_critical_points", "trace_loop", "PipelineConfig", "RunReport",
    "run", "validate", "GraspPose", "GripperSpec", "make_pose", "dedup", "rank", "relax_loop", "PointCloud",
    "generate_shape", "load_shape", "save_points",
]
