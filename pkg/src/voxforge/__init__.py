"""Geometry-guided sparse-voxel surface reconstruction on the CPU.

Pipeline: per-view level-of-detail octrees from depth priors, topology-
aligned fusion, uncertainty-weighted TSDF opacity initialization, then
per-scene optimization with differentiable rendering and refined-depth
supervision.
"""

from .camera import Camera, SimilarityTransform, umeyama_align
from .errors import DataFormatError, NumericalError
from .fusion import fuse
from .morton import MortonPath
from .priors import DepthPrior
from .refine import RefinedDepthMap, refine_depth
from .render import Ray, RenderConfig, render_ray, render_view
from .svo import Voxel, VoxelOctree, load_octree, lod_unproject, save_octree
from .synthetic import SceneSpec, generate_scene
from .tsdf_opacity import OpacityMapping, TsdfGrid, fuse_tsdf, initialize_opacity

__version__ = "0.1.0"
