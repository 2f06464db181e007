"""Radial distortion self-calibration from two-view matches with distortion averaging."""

from .averaging import AveragingConfig, WeightedModelSet, average_divisional, coverage_weight
from .geometry import (CameraModel, CorrespondenceSet, DivisionModel, FundamentalMatrix, ImageFrame,
                       epipolar_residual, undistort)
from .joint import GlobalConfig, GlobalProblem, cauchy_rho, global_refine
from .metrics import align_focal_small_angle, focal_adjusted_re, reprojection_error
from .minimal import solve_shared_lambda
from .pipeline import PipelineConfig, calibrate
from .sampson import regularization, sampson_error
from .twoview import RansacConfig, RegularizerConfig, lo_ransac_pair, refine_pair

__version__ = "0.1.0"

__all__ = [
    "AveragingConfig", "CameraModel", "CorrespondenceSet", "DivisionModel", "FundamentalMatrix",
    "GlobalConfig", "GlobalProblem", "ImageFrame", "PipelineConfig", "RansacConfig", "RegularizerConfig",
    "WeightedModelSet", "align_focal_small_angle", "average_divisional", "calibrate", "cauchy_rho",
    "coverage_weight", "epipolar_residual", "focal_adjusted_re", "global_refine", "lo_ransac_pair",
    "refine_pair", "regularization", "reprojection_error", "sampson_error", "solve_shared_lambda",
    "undistort",
]
