from .dataset import DatasetConfig, SceneArrays, build_dataset, load_split, quantize, write_dataset
from .preprocess import (
    ChannelStats,
    PreprocessedPair,
    augment,
    clip_and_scale,
    fit_reference_stats,
    flip_pair,
    preprocess,
    split_dataset,
)
from .scene import DEFAULT_CLASSES, ClassStyle, Scene, SceneConfig, generate_scene, normalize_mixture
from .speckle import apply_speckle, refined_lee

__all__ = [
    "ChannelStats",
    "ClassStyle",
    "DEFAULT_CLASSES",
    "DatasetConfig",
    "PreprocessedPair",
    "Scene",
    "SceneArrays",
    "SceneConfig",
    "apply_speckle",
    "augment",
    "build_dataset",
    "clip_and_scale",
    "fit_reference_stats",
    "flip_pair",
    "generate_scene",
    "load_split",
    "normalize_mixture",
    "preprocess",
    "quantize",
    "refined_lee",
    "split_dataset",
    "write_dataset",
]
