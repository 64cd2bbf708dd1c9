"""Rotation-invariant point cloud classification."""

from ._core import (
    ConfigError,
    Error,
    IoError,
    Model,
    NumericalError,
    geo_features,
    load_cloud,
    pca_normalize,
    pose_transforms,
    random_rotation,
    rotation_group,
    run_cli,
    synth_dataset,
    train,
)

__all__ = [
    "ConfigError",
    "Error",
    "IoError",
    "Model",
    "NumericalError",
    "geo_features",
    "load_cloud",
    "pca_normalize",
    "pose_transforms",
    "random_rotation",
    "rotation_group",
    "run_cli",
    "synth_dataset",
    "train",
]
