"""Confidence-weighted TSDF fusion and TSDF-to-opacity initialization.

The fused octree is completed with a uniform grid so empty regions carry
opacity too, a projective truncated signed distance field is accumulated at
all voxel corners (per-view distances weighted by bilinearly sampled
confidence), and a calibrated mapping turns distances into corner opacities:

* ``sigmoid``: ``phi(F) = expit(-F / beta)``, with ``beta = -a / ln(1/p - 1)``
  so that ``phi(-a) = p`` exactly.
* ``bell``: ``phi(F) = 4 e^{-sF} / (1 + e^{-sF})^2`` (logistic pdf scaled to
  peak 1 at F = 0), with ``s = ln(u)/a`` for
  ``u = (2 - b + 2 sqrt(1-b)) / b`` so that ``phi(-a) = b``.

Distances are normalized by the truncation band: F < 0 inside the surface,
F > 0 outside, |F| <= 1. Mapped opacities are rescaled affinely to
``[alpha_min, alpha_max]``; voxels whose corners all map below ``tau_prune``
(before rescaling) are dropped. Surviving corner opacities are converted to
pre-activation densities by inverting the render activation at a reference
step of one voxel side: ``rho = -ln(1 - alpha) / s_l`` and
``sigma = rho - 1`` for ``rho > 1`` else ``ln(rho)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import morton, svo
from .camera import Camera, project_points
from .rasters import sample_bilinear
from .svo import VoxelOctree


@dataclass
class TsdfGrid:
    """Truncated signed distances and confidence weights at grid points."""

    points: np.ndarray
    F: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.F = np.asarray(self.F, dtype=np.float64).reshape(-1)
        self.W = np.asarray(self.W, dtype=np.float64).reshape(-1)
        observed = self.W > 0
        if np.any(np.abs(self.F[observed]) > 1 + 1e-12):
            raise ValueError("TSDF values must lie in [-1, 1]")
        if np.any(self.W < 0):
            raise ValueError("weights must be non-negative")


def calibrate_sigmoid(a: float, p: float) -> float:
    """Slope ``beta`` with ``phi_sig(-a; beta) = p``; undefined at p = 0.5."""
    if not 0 < p < 1:
        raise ValueError("p must be in (0, 1)")
    if p == 0.5:
        raise ValueError("p = 0.5 leaves the slope undefined")
    if a <= 0:
        raise ValueError("calibration offset must be positive")
    return -a / math.log(1.0 / p - 1.0)


def calibrate_bell(a: float, b: float) -> float:
    """Slope ``s`` with ``phi_bell(-a; s) = b`` and peak 1 at F = 0."""
    if not 0 < b < 1:
        raise ValueError("b must be in (0, 1)")
    if a <= 0:
        raise ValueError("calibration offset must be positive")
    u = (2.0 - b + 2.0 * math.sqrt(1.0 - b)) / b  # the u > 1 root
    return math.log(u) / a


def phi_sigmoid(F, beta: float):
    return expit(-np.asarray(F, dtype=np.float64) / beta)


def phi_bell(F, s: float):
    x = s * np.asarray(F, dtype=np.float64)
    return 4.0 * expit(-x) * expit(x)


@dataclass(frozen=True)
class OpacityMapping:
    """Calibrated TSDF-to-opacity mapping, ``kind`` in {sigmoid, bell}."""

    kind: str = "sigmoid"
    a: float = 0.1
    p: float = 0.9
    b: float = 0.5
    slope: float = field(init=False)

    def __post_init__(self):
        if self.kind == "sigmoid":
            slope = calibrate_sigmoid(self.a, self.p)
        elif self.kind == "bell":
            slope = calibrate_bell(self.a, self.b)
        else:
            raise ValueError(f"unknown opacity mapping kind {self.kind!r}")
        if not (slope > 0 and math.isfinite(slope)):
            raise ValueError("calibration produced a non-positive slope")
        object.__setattr__(self, "slope", slope)

    def __call__(self, F):
        if self.kind == "sigmoid":
            return phi_sigmoid(F, self.slope)
        return phi_bell(F, self.slope)


def augment_with_uniform_grid(tree: VoxelOctree, level: int) -> VoxelOctree:
    """Complete the octree with level-``level`` cells over unoccupied space.

    Uniform cells already covered by an equal or coarser voxel are omitted;
    cells containing finer voxels are subdivided so only their unoccupied
    complement is added (keeping occupancy leaf-only). Added voxels carry
    zero densities and mid-gray color and are flagged in
    ``metadata['augmented']``.
    """
    if level > morton.MAX_LEVEL:
        raise ValueError("augmentation level too deep")
    occupied = {
        int(lv): np.sort(tree.codes[tree.levels == lv])
        for lv in np.unique(tree.levels)
    }
    has_desc: dict[int, np.ndarray] = {}
    for lv, codes in occupied.items():
        for anc in range(lv):
            prev = has_desc.get(anc)
            pfx = np.unique(codes >> np.uint64(3 * (lv - anc)))
            has_desc[anc] = pfx if prev is None else np.union1d(prev, pfx)

    add_levels: list[np.ndarray] = []
    add_codes: list[np.ndarray] = []
    cur_level = level
    cur = np.arange(8 ** level, dtype=np.uint64)
    while len(cur):
        covered = np.zeros(len(cur), dtype=bool)
        for lv, codes in occupied.items():
            if lv > cur_level:
                continue
            pfx = cur >> np.uint64(3 * (cur_level - lv))
            covered |= np.isin(pfx, codes)
        desc = np.isin(cur, has_desc.get(cur_level, np.zeros(0, np.uint64)))
        leaf = ~covered & ~desc
        if np.any(leaf):
            add_levels.append(np.full(int(leaf.sum()), cur_level, dtype=np.uint8))
            add_codes.append(cur[leaf])
        split = cur[~covered & desc]
        octants = np.arange(8, dtype=np.uint64)
        cur = ((split[:, None] << np.uint64(3)) | octants[None, :]).reshape(-1)
        cur_level += 1

    if not add_codes:
        return tree
    n_add = sum(len(c) for c in add_codes)
    out = VoxelOctree(
        scene_center=tree.scene_center.copy(),
        scene_size=tree.scene_size,
        levels=np.r_[tree.levels, np.concatenate(add_levels)],
        codes=np.r_[tree.codes, np.concatenate(add_codes)],
        density=np.vstack([tree.density, np.zeros((n_add, 8))]),
        sh0=np.vstack([tree.sh0, np.zeros((n_add, 3))]),
        sh_rest=np.vstack([tree.sh_rest, np.zeros((n_add, tree.sh_rest_len))]),
        metadata={
            "augmented": np.r_[np.zeros(len(tree), bool), np.ones(n_add, bool)]
        },
    )
    return out.canonical()


def build_grid(tree: VoxelOctree) -> tuple[np.ndarray, np.ndarray]:
    """Deduplicated corner grid: world points (M, 3) and per-voxel corner
    indices (N, 8) into them."""
    keys = tree.corner_keys().reshape(-1, 3)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    s_fine = tree.scene_size / (1 << morton.MAX_LEVEL)
    points = (tree.scene_center - 0.5 * tree.scene_size) + uniq * s_fine
    return points, inverse.reshape(-1, 8)


def fuse_tsdf(
    grid_points: np.ndarray,
    priors,
    cams: list[Camera] | None = None,
    d_trunc: float = 0.05,
) -> TsdfGrid:
    """Confidence-weighted projective TSDF at the given points.

    Per view, ``f = clamp((D(u, v) - z) / d_trunc, -1, 1)`` with ``(u, v, z)``
    the projection of the point and ``D`` the bilinearly sampled prior depth;
    the per-view weight is the bilinearly sampled confidence. Views where the
    point falls behind the camera, outside the raster, or more than one band
    beyond the far truncation limit (raw f < -2) contribute nothing.
    ``F`` is the weighted mean; points never observed keep ``W = 0`` and
    ``F = nan``.
    """
    if d_trunc <= 0:
        raise ValueError("truncation distance must be positive")
    points = np.asarray(grid_points, dtype=np.float64).reshape(-1, 3)
    if cams is None:
        cams = [p.camera for p in priors]
    acc_w = np.zeros(len(points))
    acc_fw = np.zeros(len(points))
    for prior, cam in zip(priors, cams):
        u, v, z = project_points(cam, points)
        front = z > 0
        depth, d_ok = sample_bilinear(prior.depth, u, v)
        conf, c_ok = sample_bilinear(prior.confidence, u, v)
        ok = front & d_ok & c_ok & (depth > 0)
        raw = np.where(ok, (depth - z) / d_trunc, 0.0)
        ok &= raw >= -2.0
        f = np.clip(raw, -1.0, 1.0)
        w = np.where(ok, conf, 0.0)
        acc_w += w
        acc_fw += w * f
    with np.errstate(invalid="ignore"):
        F = np.where(acc_w > 0, acc_fw / np.maximum(acc_w, 1e-300), np.nan)
    return TsdfGrid(points, F, acc_w)


def _densities_from_alpha(alpha: np.ndarray, step: np.ndarray) -> np.ndarray:
    """Invert ``alpha = 1 - exp(-rho * step)`` then ``rho = ELU(sigma) + 1``."""
    rho = -np.log1p(-alpha) / step
    return np.where(rho > 1.0, rho - 1.0, np.log(np.maximum(rho, 1e-300)))


def apply_opacity(
    tsdf: TsdfGrid,
    mapping: OpacityMapping,
    alpha_min: float,
    alpha_max: float,
    tau_prune: float,
    tree: VoxelOctree,
    corner_idx: np.ndarray,
) -> VoxelOctree:
    """Assign mapped corner opacities to the tree and prune empty space.

    Corners without observations (W = 0) map to opacity 0. A voxel survives
    when the maximum mapped opacity over its corners reaches ``tau_prune``;
    surviving corners are rescaled to ``[alpha_min, alpha_max]`` and
    converted to pre-activation densities at a reference step of one voxel
    side, so a voxel crossed edge-to-edge composites to about its target
    opacity.
    """
    if not (0 < alpha_min < alpha_max < 1):
        raise ValueError("need 0 < alpha_min < alpha_max < 1")
    phi = corner_phi(tsdf, mapping, corner_idx)
    keep = phi.max(axis=1) >= tau_prune
    if len(tree) == 0 or not np.any(keep):
        return svo.empty_octree(
            tree.scene_center, tree.scene_size, tree.sh_rest_len
        )
    alpha = alpha_min + (alpha_max - alpha_min) * phi[keep]
    step = tree.voxel_sizes()[keep][:, None]
    out = VoxelOctree(
        scene_center=tree.scene_center.copy(),
        scene_size=tree.scene_size,
        levels=tree.levels[keep],
        codes=tree.codes[keep],
        density=_densities_from_alpha(alpha, step),
        sh0=tree.sh0[keep].copy(),
        sh_rest=tree.sh_rest[keep].copy(),
    )
    return out.canonical()


def corner_phi(
    tsdf: TsdfGrid, mapping: OpacityMapping, corner_idx: np.ndarray
) -> np.ndarray:
    """Mapped opacity at every voxel corner (N, 8); unobserved corners get 0."""
    corner_idx = np.asarray(corner_idx)
    F = tsdf.F[corner_idx]
    W = tsdf.W[corner_idx]
    observed = W > 0
    return np.where(observed, mapping(np.where(observed, F, 0.0)), 0.0)


def compare_mapping_sparsity(
    tsdf: TsdfGrid,
    sigmoid_map: OpacityMapping,
    bell_map: OpacityMapping,
    tau_prune: float,
    corner_idx: np.ndarray,
) -> tuple[int, int]:
    """Surviving-voxel counts under each mapping at the same threshold."""
    if len(corner_idx) == 0:
        return 0, 0
    n_sig = int((corner_phi(tsdf, sigmoid_map, corner_idx).max(axis=1) >= tau_prune).sum())
    n_bell = int((corner_phi(tsdf, bell_map, corner_idx).max(axis=1) >= tau_prune).sum())
    return n_sig, n_bell


def default_trunc(tree: VoxelOctree) -> float:
    """Three times the finest voxel side of the tree."""
    if len(tree) == 0:
        return 3.0 * tree.scene_size
    return 3.0 * tree.scene_size / (1 << int(tree.levels.max()))


def default_augment_level(tree: VoxelOctree) -> int:
    """Median occupied level, the default resolution for grid completion."""
    if len(tree) == 0:
        return 0
    return int(np.median(tree.levels.astype(np.int64)))


def initialize_opacity(
    fused: VoxelOctree,
    priors,
    cams: list[Camera] | None = None,
    mapping: OpacityMapping | None = None,
    d_trunc: float | None = None,
    augment_level: int | None = None,
    alpha_min: float = 0.01,
    alpha_max: float = 0.99,
    tau_prune: float = 0.05,
) -> tuple[VoxelOctree, TsdfGrid]:
    """Full opacity initialization: augment, fuse TSDF, map, prune."""
    mapping = mapping or OpacityMapping()
    if augment_level is None:
        augment_level = default_augment_level(fused)
    if d_trunc is None:
        d_trunc = default_trunc(fused)
    grid_tree = augment_with_uniform_grid(fused, augment_level)
    points, corner_idx = build_grid(grid_tree)
    tsdf = fuse_tsdf(points, priors, cams, d_trunc)
    tree = apply_opacity(
        tsdf, mapping, alpha_min, alpha_max, tau_prune, grid_tree, corner_idx
    )
    return tree, tsdf
