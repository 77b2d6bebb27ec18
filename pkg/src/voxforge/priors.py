"""Depth prior ingestion: per-view depth, confidence, and estimated pose.

Priors stand in for whatever model produced them; the pipeline needs only a
dense depth raster, an optional confidence raster in [0, 1], and a camera.
Files use the IMGF float raster container (``*_depth.img``/``*_conf.img``);
a missing confidence file loads as all-ones with ``confidence_defaulted``
set, so downstream weighting degrades gracefully.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, SimilarityTransform, apply_similarity_to_camera
from .errors import DataFormatError
from .rasters import load_float_raster, save_float_raster


@dataclass
class DepthPrior:
    depth: np.ndarray
    confidence: np.ndarray
    camera: Camera
    confidence_defaulted: bool = field(default=False)

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.depth.shape != self.confidence.shape:
            raise ValueError("depth and confidence rasters differ in shape")
        finite = self.confidence[np.isfinite(self.confidence)]
        if finite.size and (finite.min() < 0 or finite.max() > 1):
            raise ValueError("confidence must lie in [0, 1]")


def prior_paths(directory, index: int) -> tuple[str, str]:
    base = os.path.join(directory, f"prior_{index:03d}")
    return base + "_depth.img", base + "_conf.img"


def save_prior(directory, index: int, prior: DepthPrior) -> None:
    depth_path, conf_path = prior_paths(directory, index)
    save_float_raster(depth_path, prior.depth)
    if not prior.confidence_defaulted:
        save_float_raster(conf_path, prior.confidence)


def load_prior(directory, index: int, camera: Camera) -> DepthPrior:
    depth_path, conf_path = prior_paths(directory, index)
    if not os.path.exists(depth_path):
        raise DataFormatError(f"missing depth prior {depth_path}")
    depth = load_float_raster(depth_path)
    if depth.ndim != 2:
        raise DataFormatError(f"{depth_path}: depth prior must be single-channel")
    defaulted = not os.path.exists(conf_path)
    if defaulted:
        confidence = np.ones_like(depth)
    else:
        confidence = load_float_raster(conf_path)
        if confidence.shape != depth.shape:
            raise DataFormatError(
                f"{conf_path}: confidence shape {confidence.shape} does not "
                f"match depth shape {depth.shape}"
            )
    return DepthPrior(depth, confidence, camera, confidence_defaulted=defaulted)


def align_prior(prior: DepthPrior, transform: SimilarityTransform) -> DepthPrior:
    """Carry a prior into the frame targeted by ``transform``.

    The camera is re-expressed in the target frame and depths are scaled by
    the global similarity scale so they stay metric.
    """
    return DepthPrior(
        depth=prior.depth * transform.s,
        confidence=prior.confidence.copy(),
        camera=apply_similarity_to_camera(prior.camera, transform),
        confidence_defaulted=prior.confidence_defaulted,
    )
