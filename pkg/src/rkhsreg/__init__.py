"""Correspondence-free SE(3) point-cloud registration in an RKHS over equivariant features."""

from .errors import (
    AngleNearPi,
    ChannelMismatch,
    EmptyCloud,
    EmptyDataset,
    EmptyMesh,
    ParseError,
    RegistrationError,
    ShapeMismatch,
    TooFewPoints,
    UnsupportedFormat,
)
from .features import EncoderWeights, FeatureCloud, apply_pose_features, encoder_forward, handcrafted_features
from .geometry import PointCloud, Pose, rotation_error_deg, se3_exp, se3_log, translation_error
from .registration import RegistrationConfig, RegistrationResult, objective_and_gradient, register
from .rkhs import KernelParams, cross_inner_product, kernel_eval, rkhs_distance

__version__ = "0.1.0"

__all__ = [
    "AngleNearPi",
    "ChannelMismatch",
    "EmptyCloud",
    "EmptyDataset",
    "EmptyMesh",
    "EncoderWeights",
    "FeatureCloud",
    "KernelParams",
    "ParseError",
    "PointCloud",
    "Pose",
    "RegistrationConfig",
    "RegistrationError",
    "RegistrationResult",
    "ShapeMismatch",
    "TooFewPoints",
    "UnsupportedFormat",
    "apply_pose_features",
    "cross_inner_product",
    "encoder_forward",
    "handcrafted_features",
    "kernel_eval",
    "objective_and_gradient",
    "register",
    "rkhs_distance",
    "rotation_error_deg",
    "se3_exp",
    "se3_log",
    "translation_error",
]
