"""Per-scene optimization: losses, moment-based updates, training schedule.

The objective is ``total = w_photo * photo + w_reg * reg + w_refd * refd``
with photometric mean absolute color error, an l1 term against the refined
depth targets, and a regularizer hook that currently returns 0 (the weight
is wired so an external term can drop in). Updates are bias-corrected Adam
with separate learning rates for corner densities, degree-0 SH, and higher
SH bands. Refined-depth targets are refreshed every ``refresh_r`` iterations
without gradients flowing through the target selection, and the octree is
pruned/subdivided on its own interval with optimizer moments remapped to the
surviving voxels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .errors import NumericalError
from .refine import RefinedDepthMap, refine_depth
from .render import (
    Gradients,
    RenderConfig,
    RenderStats,
    backward,
    prune_and_subdivide,
    render_view,
)
from .svo import VoxelOctree

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 500
    prune_interval: int = 200
    refresh_r: int = 100
    lr_density: float = 5e-2
    lr_sh0: float = 1e-2
    lr_sh_rest: float = 2.5e-4
    lambda_photo: float = 0.1
    lambda_reg: float = 1.0
    lambda_refd: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tau_prune: float = 1e-4
    max_subdiv_frac: float = 0.05
    level_max: int = 12
    refine_k: int = 4
    refine_n_rand: int = 16
    refine_s: float = 0.04
    refine_reproj_thresh: float = 1.0
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class LossReport:
    l_photo: float
    l_refd: float
    l_reg: float
    total: float
    n_photo: int
    n_refd: int

    @classmethod
    def build(
        cls, l_photo, l_refd, l_reg, w_photo, w_reg, w_refd, n_photo=0, n_refd=0
    ) -> "LossReport":
        total = w_photo * l_photo + w_reg * l_reg + w_refd * l_refd
        return cls(l_photo, l_refd, l_reg, total, n_photo, n_refd)


def loss_photo(rendered: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Mean absolute color error over masked pixels, with its gradient.

    Returns ``(value, grad, n_valid)``; an empty mask gives 0 with a warning.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if rendered.shape != target.shape or mask.shape != rendered.shape[:2]:
        raise ValueError("raster shapes differ")
    n = int(mask.sum())
    grad = np.zeros_like(rendered)
    if n == 0:
        logger.warning("loss_photo: empty mask")
        return 0.0, grad, 0
    diff = rendered - target
    count = n * rendered.shape[-1]
    value = float(np.abs(diff[mask]).sum() / count)
    grad[mask] = np.sign(diff[mask]) / count
    return value, grad, n


def loss_refined_depth(
    rendered_depth: np.ndarray,
    depth_valid: np.ndarray,
    refined: RefinedDepthMap,
):
    """Mean l1 distance to the refined targets over jointly valid pixels."""
    rendered_depth = np.asarray(rendered_depth, dtype=np.float64)
    mask = refined.valid & np.asarray(depth_valid, dtype=bool) & np.isfinite(rendered_depth)
    n = int(mask.sum())
    grad = np.zeros_like(rendered_depth)
    if n == 0:
        logger.warning("loss_refined_depth: empty mask")
        return 0.0, grad, 0
    diff = rendered_depth - refined.depth
    value = float(np.abs(diff[mask]).sum() / n)
    grad[mask] = np.sign(diff[mask]) / n
    return value, grad, n


def loss_regularizer(tree: VoxelOctree) -> float:
    """Placeholder for an external geometric regularizer (currently 0)."""
    return 0.0


class AdamState:
    """Bias-corrected first/second moment accumulators per parameter group."""

    GROUPS = ("density", "sh0", "sh_rest")

    def __init__(self, tree: VoxelOctree, cfg: TrainConfig):
        self.cfg = cfg
        self.step_count = 0
        self.lr = {
            "density": cfg.lr_density,
            "sh0": cfg.lr_sh0,
            "sh_rest": cfg.lr_sh_rest,
        }
        self.m = {g: np.zeros_like(getattr(tree, g)) for g in self.GROUPS}
        self.v = {g: np.zeros_like(getattr(tree, g)) for g in self.GROUPS}

    def step(self, tree: VoxelOctree, grads: Gradients) -> VoxelOctree:
        """One Adam update in place; raises on non-finite gradients."""
        self.step_count += 1
        t = self.step_count
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        for group in self.GROUPS:
            g = getattr(grads, group)
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in parameter group {group}")
            self.m[group] = b1 * self.m[group] + (1 - b1) * g
            self.v[group] = b2 * self.v[group] + (1 - b2) * g * g
            m_hat = self.m[group] / (1 - b1**t)
            v_hat = self.v[group] / (1 - b2**t)
            param = getattr(tree, group)
            param -= self.lr[group] * m_hat / (np.sqrt(v_hat) + eps)
            if not np.all(np.isfinite(param)):
                raise NumericalError(f"non-finite parameter in group {group}")
        return tree

    def remap(self, kept_idx: np.ndarray, split_idx: np.ndarray) -> None:
        """Reindex moments after prune/subdivide: kept voxels keep theirs,
        children inherit the parent's."""
        for acc in (self.m, self.v):
            for group in self.GROUPS:
                old = acc[group]
                acc[group] = np.concatenate(
                    [old[kept_idx], np.repeat(old[split_idx], 8, axis=0)], axis=0
                )


@dataclass
class TrainResult:
    tree: VoxelOctree
    trace: list[LossReport]
    voxel_counts: list[int] = field(default_factory=list)


def _render_all_depths(tree, cams, rcfg):
    depths = []
    for cam in cams:
        view = render_view(tree, cam, rcfg)
        d = np.where(view.depth_valid, view.depth, np.nan)
        depths.append(d)
    return depths


def train(
    tree: VoxelOctree,
    cams: list[Camera],
    images: list[np.ndarray],
    cfg: TrainConfig | None = None,
) -> TrainResult:
    """Optimize the octree against the training views.

    Each iteration renders one view (round-robin), applies the weighted
    photometric and refined-depth gradients, and steps Adam. Targets are
    refreshed every ``refresh_r`` iterations; pruning/subdivision runs every
    ``prune_interval`` iterations using contribution statistics accumulated
    since the previous restructuring. Divergence (non-finite loss) aborts
    with the trace attached to the raised error.
    """
    cfg = cfg or TrainConfig()
    rcfg = RenderConfig(background=np.asarray(cfg.background, dtype=np.float64))
    n_views = len(cams)
    trace: list[LossReport] = []
    counts: list[int] = []
    refined: dict[int, RefinedDepthMap] = {}
    stats = RenderStats.zeros(len(tree))
    state = AdamState(tree, cfg)

    for it in range(cfg.iters):
        if cfg.lambda_refd > 0 and it % cfg.refresh_r == 0:
            depths = _render_all_depths(tree, cams, rcfg)
            refined = {
                v: refine_depth(
                    v,
                    cams,
                    images,
                    depths,
                    k=min(cfg.refine_k, n_views - 1),
                    n_rand=cfg.refine_n_rand,
                    s=cfg.refine_s,
                    reproj_thresh=cfg.refine_reproj_thresh,
                    seed=cfg.seed,
                    iteration=it,
                )
                for v in range(n_views)
            }

        view = it % n_views
        out = render_view(tree, cams[view], rcfg)
        full_mask = np.ones(out.depth.shape, dtype=bool)
        l_photo, g_color, n_photo = loss_photo(out.color, images[view], full_mask)
        if cfg.lambda_refd > 0 and view in refined:
            l_refd, g_depth, n_refd = loss_refined_depth(
                out.depth, out.depth_valid, refined[view]
            )
        else:
            l_refd, g_depth, n_refd = 0.0, np.zeros_like(out.depth), 0
        l_reg = loss_regularizer(tree)
        report = LossReport.build(
            l_photo, l_refd, l_reg,
            cfg.lambda_photo, cfg.lambda_reg, cfg.lambda_refd,
            n_photo, n_refd,
        )
        if not np.isfinite(report.total):
            err = NumericalError(f"diverged at iteration {it}")
            err.trace = trace
            raise err
        trace.append(report)
        counts.append(len(tree))

        grads = backward(
            out.samples,
            grad_color=(cfg.lambda_photo * g_color).reshape(-1, 3),
            grad_depth=(cfg.lambda_refd * g_depth).reshape(-1),
        )
        pixel_err = np.abs(out.color - images[view]).mean(axis=2).reshape(-1)
        stats.update(out.samples, pixel_err)
        state.step(tree, grads)

        last = it + 1 == cfg.iters
        if cfg.prune_interval > 0 and (it + 1) % cfg.prune_interval == 0 and not last:
            max_new = int(cfg.max_subdiv_frac * len(tree))
            tree, kept_idx, split_idx = prune_and_subdivide(
                tree, stats, cfg.tau_prune, max_new, cfg.level_max
            )
            state.remap(kept_idx, split_idx)
            stats = RenderStats.zeros(len(tree))
            logger.info(
                "iteration %d: pruned to %d voxels (%d split)",
                it + 1, len(tree), len(split_idx),
            )

    return TrainResult(tree=tree, trace=trace, voxel_counts=counts)


def format_trace(trace: list[LossReport], counts: list[int]) -> str:
    """Newline-delimited ``iter l_photo l_refd l_reg total voxel_count``."""
    lines = []
    for i, (rep, n) in enumerate(zip(trace, counts)):
        lines.append(
            f"{i} {rep.l_photo:.17g} {rep.l_refd:.17g} "
            f"{rep.l_reg:.17g} {rep.total:.17g} {n}"
        )
    return "\n".join(lines) + ("\n" if lines else "")
