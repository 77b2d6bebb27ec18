"""Differentiable sparse-voxel volume renderer.

Forward model, per ray: voxel chord segments are found with a parametric
slab test, sorted front-to-back by entry distance, and composited with

    alpha_k = 1 - exp(-rho_k * dt_k),     rho = ELU(sigma) + 1,
    T_k     = prod_{j<k} (1 - alpha_j),
    C       = sum_k T_k alpha_k c_k + T_final * background,

with one density sample per segment at the chord midpoint (exact for
piecewise-constant fields). Depth is the expected termination distance
``sum w_k t_k / sum w_k`` and normals composite the per-sample unit
gradients of rho. Compositing is evaluated per ray in a padded layout so
the telescoping ``sum_k w_k + T_final = 1`` holds to machine precision.

The backward pass is the exact chain rule through the compositing weights:
with ``q_k = rho_k dt_k`` and per-sample adjoints ``G_k = dL/dw_k``,

    dL/dq_m = G_m T_{m+1} - sum_{k>m} G_k w_k - (dL/dT_final) T_final,

then through the trilinear interpolation into the eight corner densities.
Gradients flow to corner densities and sh0 (higher SH bands are stored but
not rendered).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import morton
from .camera import Camera, project_points
from .svo import CORNER_OFFSETS, SH_C0, VoxelOctree, sh0_to_color

_TINY_DIR = 1e-300


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = np.inf

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValueError("need t_near < t_far")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class RenderConfig:
    background: np.ndarray = field(
        default_factory=lambda: np.zeros(3, dtype=np.float64)
    )
    t_min_transmit: float = 1e-4  # stop compositing once T drops below this
    min_depth_acc: float = 0.5    # opacity needed for a trusted depth sample

    def __post_init__(self):
        object.__setattr__(
            self, "background",
            np.asarray(self.background, dtype=np.float64).reshape(3),
        )


@dataclass
class RenderOutput:
    """Single-ray render result."""

    color: np.ndarray
    depth: float
    depth_valid: bool
    normal: np.ndarray
    acc: float
    t_final: float
    samples: "SampleSet"


@dataclass
class SampleSet:
    """Flat per-sample records of a forward pass (the autodiff tape).

    Samples are sorted by (ray, entry distance, storage-independent Morton
    key); ``row``/``slot`` give each sample's position in the padded per-ray
    layout used for compositing.
    """

    n_rays: int
    ray: np.ndarray
    vox: np.ndarray
    t_entry: np.ndarray
    t_mid: np.ndarray
    dt: np.ndarray
    u: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray
    w: np.ndarray
    included: np.ndarray
    row: np.ndarray
    slot: np.ndarray
    rows_ray: np.ndarray
    t_exit_pad: np.ndarray
    t_entry_pad: np.ndarray
    acc: np.ndarray
    depth: np.ndarray
    t_final: np.ndarray
    colors: np.ndarray
    n_voxels: int
    sh_rest_len: int
    background: np.ndarray


def elu_plus_one(sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    return np.where(sigma > 0, sigma + 1.0, np.exp(np.minimum(sigma, 0.0)))


def elu_plus_one_grad(sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    return np.where(sigma > 0, 1.0, np.exp(np.minimum(sigma, 0.0)))


def trilinear_weights(u: np.ndarray) -> np.ndarray:
    """Corner weights (S, 8) for local coordinates u in [0, 1]^3."""
    u = np.asarray(u, dtype=np.float64).reshape(-1, 3)
    off = CORNER_OFFSETS  # (8, 3)
    w = np.ones((len(u), 8))
    for ax in range(3):
        w = w * np.where(off[None, :, ax] == 1, u[:, ax, None], 1.0 - u[:, ax, None])
    return w


def trilinear_weight_grads(u: np.ndarray) -> np.ndarray:
    """d w_m / d u_ax, shape (S, 8, 3)."""
    u = np.asarray(u, dtype=np.float64).reshape(-1, 3)
    off = CORNER_OFFSETS
    g = np.ones((len(u), 8, 3))
    for ax in range(3):
        term = np.where(off[None, :, ax] == 1, u[:, ax, None], 1.0 - u[:, ax, None])
        sign = np.where(off[None, :, ax] == 1, 1.0, -1.0)
        for out_ax in range(3):
            if out_ax == ax:
                g[:, :, out_ax] *= sign
            else:
                g[:, :, out_ax] *= term
    return g


def sample_density(voxel, u) -> tuple[float, float]:
    """Trilinear pre-activation density and activated density at ``u``."""
    u = np.asarray(u, dtype=np.float64).reshape(3)
    if np.any(u < 0) or np.any(u > 1):
        raise ValueError("local coordinate outside the unit cube")
    w = trilinear_weights(u[None])[0]
    dens = np.asarray(voxel.corner_density, dtype=np.float64)
    sigma = float(w @ dens)
    return sigma, float(elu_plus_one(sigma))


def surface_normal(voxel, u) -> tuple[np.ndarray, bool]:
    """Unit gradient of the activated density; flag False if it vanishes."""
    u = np.asarray(u, dtype=np.float64).reshape(3)
    dens = np.asarray(voxel.corner_density, dtype=np.float64)
    w = trilinear_weights(u[None])[0]
    gw = trilinear_weight_grads(u[None])[0]
    sigma = float(w @ dens)
    grad = elu_plus_one_grad(sigma) * (dens @ gw)
    norm = np.linalg.norm(grad)
    if norm <= 1e-12:
        return np.zeros(3), False
    return grad / norm, True


def order_voxels(tree: VoxelOctree, direction) -> np.ndarray:
    """Front-to-back traversal permutation for the direction's sign octant.

    Sorts by Morton code with per-axis bit flips on negative direction
    components; for a leaf-only octree this equals sorting by ray entry
    distance (ties in either order) for every ray with that sign pattern.
    """
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    if np.all(direction == 0):
        raise ValueError("degenerate direction")
    keys = morton.traversal_keys(tree.codes, tree.levels, direction)
    return np.argsort(keys, kind="stable")


class _TreeGeometry:
    """Precomputed per-voxel arrays shared by the render entry points."""

    def __init__(self, tree: VoxelOctree):
        self.tree = tree
        self.mins = tree.cell_min_corners()
        self.sizes = tree.voxel_sizes()
        self.maxs = self.mins + self.sizes[:, None]
        self.colors = sh0_to_color(tree.sh0)
        self.tiebreak = morton.sort_keys(tree.codes, tree.levels)


def _slab_intersect(geom, origins, dirs, pair_ray, pair_vox, t_near, t_far):
    """Exact ray/box chords for candidate pairs; returns filtered pairs."""
    o = origins[pair_ray]
    d = dirs[pair_ray]
    d = np.where(d >= 0, np.maximum(d, _TINY_DIR), np.minimum(d, -_TINY_DIR))
    inv = 1.0 / d
    t1 = (geom.mins[pair_vox] - o) * inv
    t2 = (geom.maxs[pair_vox] - o) * inv
    t_lo = np.minimum(t1, t2).max(axis=1)
    t_hi = np.maximum(t1, t2).min(axis=1)
    t_lo = np.maximum(t_lo, np.maximum(t_near, 0.0))
    t_hi = np.minimum(t_hi, t_far)
    hit = t_hi > t_lo
    return pair_ray[hit], pair_vox[hit], t_lo[hit], t_hi[hit]


def _composite(
    geom: _TreeGeometry,
    origins: np.ndarray,
    dirs: np.ndarray,
    pair_ray: np.ndarray,
    pair_vox: np.ndarray,
    t_lo: np.ndarray,
    t_hi: np.ndarray,
    cfg: RenderConfig,
):
    """Sort, sample, and alpha-composite intersected segments."""
    n_rays = len(origins)
    tree = geom.tree

    order = np.lexsort((geom.tiebreak[pair_vox], t_lo, pair_ray))
    ray = pair_ray[order]
    vox = pair_vox[order]
    t_lo = t_lo[order]
    t_hi = t_hi[order]

    dt = t_hi - t_lo
    t_mid = 0.5 * (t_lo + t_hi)
    x = origins[ray] + t_mid[:, None] * dirs[ray]
    u = np.clip((x - geom.mins[vox]) / geom.sizes[vox][:, None], 0.0, 1.0)
    w_tri = trilinear_weights(u)
    sigma = np.einsum("sm,sm->s", w_tri, tree.density[vox])
    rho = elu_plus_one(sigma)
    q = rho * dt

    # Padded per-ray layout: row r holds the samples of one ray in order.
    new_ray = np.r_[True, ray[1:] != ray[:-1]] if len(ray) else np.zeros(0, bool)
    row = np.cumsum(new_ray) - 1 if len(ray) else np.zeros(0, np.int64)
    starts = np.flatnonzero(new_ray)
    counts = np.diff(np.r_[starts, len(ray)])
    slot = np.arange(len(ray)) - np.repeat(starts, counts) if len(ray) else np.zeros(0, np.int64)
    n_rows = len(starts)
    width = int(counts.max()) if n_rows else 0
    rows_ray = ray[starts] if n_rows else np.zeros(0, np.int64)

    q_pad = np.zeros((n_rows, width))
    q_pad[row, slot] = q
    csum = np.cumsum(q_pad, axis=1)
    t_exit_pad = np.exp(-csum)
    t_entry_pad = np.concatenate(
        [np.ones((n_rows, 1)), t_exit_pad[:, :-1]], axis=1
    ) if width else np.ones((n_rows, 0))

    included_pad = t_entry_pad > cfg.t_min_transmit
    occupied = np.zeros((n_rows, width), dtype=bool)
    occupied[row, slot] = True
    included_pad &= occupied

    w_pad = np.where(included_pad, t_entry_pad - t_exit_pad, 0.0)
    w = w_pad[row, slot]
    included = included_pad[row, slot]

    # Transmittance after the last included sample (1 when none).
    n_inc = included_pad.sum(axis=1)
    t_final_rows = np.ones(n_rows)
    has = n_inc > 0
    t_final_rows[has] = t_exit_pad[has, n_inc[has] - 1]

    colors = geom.colors[vox]
    acc_rows = w_pad.sum(axis=1)
    tmid_pad = np.zeros((n_rows, width))
    tmid_pad[row, slot] = t_mid
    depth_num = (w_pad * tmid_pad).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth_rows = np.where(acc_rows > 0, depth_num / np.maximum(acc_rows, 1e-300), np.nan)

    col_pad = np.zeros((n_rows, width, 3))
    col_pad[row, slot] = colors
    color_rows = (w_pad[:, :, None] * col_pad).sum(axis=1)

    # Per-sample unit normals of the activated density field.
    gw = trilinear_weight_grads(u)
    grad_sigma = np.einsum("sm,smx->sx", tree.density[vox], gw)
    grad_rho = elu_plus_one_grad(sigma)[:, None] * grad_sigma
    gnorm = np.linalg.norm(grad_rho, axis=1)
    ok_n = gnorm > 1e-12
    normals = np.zeros_like(grad_rho)
    normals[ok_n] = grad_rho[ok_n] / gnorm[ok_n, None]
    nrm_pad = np.zeros((n_rows, width, 3))
    nrm_pad[row, slot] = normals
    normal_rows = (w_pad[:, :, None] * nrm_pad).sum(axis=1)

    # Scatter row results to full ray arrays; empty rays keep T_final = 1 and
    # therefore plain background color.
    acc = np.zeros(n_rays)
    t_final = np.ones(n_rays)
    depth = np.full(n_rays, np.nan)
    color = np.zeros((n_rays, 3))
    normal = np.zeros((n_rays, 3))
    acc[rows_ray] = acc_rows
    t_final[rows_ray] = t_final_rows
    depth[rows_ray] = depth_rows
    color[rows_ray] = color_rows
    normal[rows_ray] = normal_rows
    color += t_final[:, None] * cfg.background[None, :]

    samples = SampleSet(
        n_rays=n_rays,
        ray=ray,
        vox=vox,
        t_entry=t_lo,
        t_mid=t_mid,
        dt=dt,
        u=u,
        sigma=sigma,
        rho=rho,
        w=w,
        included=included,
        row=row,
        slot=slot,
        rows_ray=rows_ray,
        t_exit_pad=t_exit_pad,
        t_entry_pad=t_entry_pad,
        acc=acc,
        depth=depth,
        t_final=t_final,
        colors=colors,
        n_voxels=len(tree),
        sh_rest_len=tree.sh_rest_len,
        background=cfg.background,
    )
    return color, depth, normal, acc, t_final, samples


def _all_pair_candidates(n_voxels: int, n_rays: int, chunk: int = 4_000_000):
    """Candidate (ray, voxel) pairs covering the full cross product."""
    pair_vox, pair_ray = np.meshgrid(
        np.arange(n_voxels, dtype=np.int64),
        np.arange(n_rays, dtype=np.int64),
        indexing="ij",
    )
    return pair_ray.reshape(-1), pair_vox.reshape(-1)


def render_rays(
    tree: VoxelOctree,
    origins: np.ndarray,
    dirs: np.ndarray,
    cfg: RenderConfig | None = None,
    t_near: float = 0.0,
    t_far: float = np.inf,
):
    """Render a batch of arbitrary rays (all-pairs candidate generation).

    Returns ``(color, depth, normal, acc, t_final, samples)`` with leading
    dimension the number of rays. Directions must be unit length.
    """
    cfg = cfg or RenderConfig()
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    geom = _TreeGeometry(tree)
    if len(tree) == 0 or len(origins) == 0:
        pair_ray = np.zeros(0, np.int64)
        pair_vox = np.zeros(0, np.int64)
        t_lo = t_hi = np.zeros(0)
    else:
        pair_ray, pair_vox = _all_pair_candidates(len(tree), len(origins))
        pair_ray, pair_vox, t_lo, t_hi = _slab_intersect(
            geom, origins, dirs, pair_ray, pair_vox, t_near, t_far
        )
    return _composite(geom, origins, dirs, pair_ray, pair_vox, t_lo, t_hi, cfg)


def render_ray(tree: VoxelOctree, ray: Ray, cfg: RenderConfig | None = None) -> RenderOutput:
    """Render a single ray; see :func:`render_rays`."""
    cfg = cfg or RenderConfig()
    color, depth, normal, acc, t_final, samples = render_rays(
        tree,
        ray.origin[None],
        ray.direction[None],
        cfg,
        t_near=ray.t_near,
        t_far=ray.t_far,
    )
    return RenderOutput(
        color=color[0],
        depth=float(depth[0]),
        depth_valid=bool(acc[0] >= cfg.min_depth_acc),
        normal=normal[0],
        acc=float(acc[0]),
        t_final=float(t_final[0]),
        samples=samples,
    )


def _view_candidates(geom: _TreeGeometry, cam: Camera):
    """(ray, voxel) candidates from projected voxel bounding rectangles.

    The convex hull of the eight projected corners contains the voxel's
    silhouette, so its pixel-aligned bounding box is a conservative candidate
    set; the exact slab test prunes the rest. Voxels with any corner at or
    behind the camera plane conservatively cover the whole raster.
    """
    n = len(geom.tree)
    if n == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    corners = geom.mins[:, None, :] + CORNER_OFFSETS[None, :, :] * geom.sizes[:, None, None]
    u, v, z = project_points(cam, corners.reshape(-1, 3))
    u = u.reshape(n, 8)
    v = v.reshape(n, 8)
    z = z.reshape(n, 8)
    behind = np.any(z <= 1e-12, axis=1)

    u0 = np.where(behind, 0, np.ceil(u.min(axis=1))).astype(np.int64)
    u1 = np.where(behind, cam.width - 1, np.floor(u.max(axis=1))).astype(np.int64)
    v0 = np.where(behind, 0, np.ceil(v.min(axis=1))).astype(np.int64)
    v1 = np.where(behind, cam.height - 1, np.floor(v.max(axis=1))).astype(np.int64)
    u0 = np.clip(u0, 0, cam.width - 1)
    u1 = np.clip(u1, -1, cam.width - 1)
    v0 = np.clip(v0, 0, cam.height - 1)
    v1 = np.clip(v1, -1, cam.height - 1)

    wides = u1 - u0 + 1
    talls = v1 - v0 + 1
    counts = np.maximum(wides, 0) * np.maximum(talls, 0)
    keep = counts > 0
    idx = np.flatnonzero(keep)
    counts = counts[keep]
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)

    pair_vox = np.repeat(idx, counts)
    offsets = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - offsets
    wid = wides[keep][np.repeat(np.arange(len(idx)), counts)]
    du = local % wid
    dv = local // wid
    pu = u0[idx][np.repeat(np.arange(len(idx)), counts)] + du
    pv = v0[idx][np.repeat(np.arange(len(idx)), counts)] + dv
    pair_ray = pv * cam.width + pu
    return pair_ray, pair_vox


@dataclass
class ViewRender:
    """Full-view render: HxW rasters plus the sample tape for backward."""

    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    acc: np.ndarray
    t_final: np.ndarray
    depth_valid: np.ndarray
    samples: SampleSet


def render_view(tree: VoxelOctree, cam: Camera, cfg: RenderConfig | None = None) -> ViewRender:
    """Render every pixel-center ray of the camera."""
    cfg = cfg or RenderConfig()
    h, w = cam.height, cam.width
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs = cam.ray_directions(uu.reshape(-1), vv.reshape(-1))
    origins = np.broadcast_to(cam.center, (h * w, 3))

    geom = _TreeGeometry(tree)
    pair_ray, pair_vox = _view_candidates(geom, cam)
    pair_ray, pair_vox, t_lo, t_hi = _slab_intersect(
        geom, origins, dirs, pair_ray, pair_vox, 0.0, np.inf
    )
    color, depth, normal, acc, t_final, samples = _composite(
        geom, origins, dirs, pair_ray, pair_vox, t_lo, t_hi, cfg
    )
    return ViewRender(
        color=color.reshape(h, w, 3),
        depth=depth.reshape(h, w),
        normal=normal.reshape(h, w, 3),
        acc=acc.reshape(h, w),
        t_final=t_final.reshape(h, w),
        depth_valid=(acc >= cfg.min_depth_acc).reshape(h, w),
        samples=samples,
    )


@dataclass
class Gradients:
    density: np.ndarray
    sh0: np.ndarray
    sh_rest: np.ndarray


def backward(
    samples: SampleSet,
    grad_color: np.ndarray | None = None,
    grad_depth: np.ndarray | None = None,
    grad_acc: np.ndarray | None = None,
) -> Gradients:
    """Adjoints of the forward pass w.r.t. corner densities and sh0.

    ``grad_color`` (n_rays, 3), ``grad_depth`` and ``grad_acc`` (n_rays,) are
    the loss gradients of the per-ray outputs; omitted ones count as zero.
    Depth gradients on rays with zero accumulated opacity are ignored (the
    depth output is undefined there).
    """
    s = samples
    n = s.n_rays
    gc = np.zeros((n, 3)) if grad_color is None else np.asarray(grad_color, dtype=np.float64).reshape(n, 3)
    gd = np.zeros(n) if grad_depth is None else np.asarray(grad_depth, dtype=np.float64).reshape(n)
    ga = np.zeros(n) if grad_acc is None else np.asarray(grad_acc, dtype=np.float64).reshape(n)

    grad_density = np.zeros((s.n_voxels, 8))
    grad_sh0 = np.zeros((s.n_voxels, 3))
    grad_sh_rest = np.zeros((s.n_voxels, s.sh_rest_len))
    if len(s.ray) == 0:
        return Gradients(grad_density, grad_sh0, grad_sh_rest)

    acc_ray = s.acc[s.ray]
    depth_ray = s.depth[s.ray]
    gd_ray = np.where(acc_ray > 0, gd[s.ray], 0.0)
    depth_term = np.where(
        acc_ray > 0,
        (s.t_mid - np.where(np.isnan(depth_ray), 0.0, depth_ray))
        / np.maximum(acc_ray, 1e-300),
        0.0,
    )
    G = (
        np.einsum("sc,sc->s", gc[s.ray], s.colors)
        + ga[s.ray]
        + gd_ray * depth_term
    )

    # dL/dq_m = G_m T_{m+1} - sum_{k>m} G_k w_k - (gc . background) T_final.
    n_rows, width = s.t_exit_pad.shape
    Gw_pad = np.zeros((n_rows, width))
    Gw_pad[s.row, s.slot] = G * s.w
    suffix = np.cumsum(Gw_pad[:, ::-1], axis=1)[:, ::-1] - Gw_pad
    t_exit = s.t_exit_pad[s.row, s.slot]
    g_tfinal_rows = (gc[s.rows_ray] * s.background[None, :]).sum(axis=1)
    dq = (
        G * t_exit
        - suffix[s.row, s.slot]
        - (g_tfinal_rows * s.t_final[s.rows_ray])[s.row]
    )
    dq = np.where(s.included, dq, 0.0)

    drho = dq * s.dt
    dsigma = drho * elu_plus_one_grad(s.sigma)
    w_tri = trilinear_weights(s.u)
    np.add.at(grad_density, s.vox, dsigma[:, None] * w_tri)

    dcolor = gc[s.ray] * s.w[:, None]
    np.add.at(grad_sh0, s.vox, SH_C0 * dcolor)
    return Gradients(grad_density, grad_sh0, grad_sh_rest)


def backward_ray(
    tree: VoxelOctree,
    output: RenderOutput,
    grad_color=None,
    grad_depth: float = 0.0,
    grad_acc: float = 0.0,
) -> Gradients:
    """Single-ray convenience wrapper over :func:`backward`."""
    gc = None if grad_color is None else np.asarray(grad_color, dtype=np.float64).reshape(1, 3)
    return backward(
        output.samples,
        grad_color=gc,
        grad_depth=np.array([grad_depth]),
        grad_acc=np.array([grad_acc]),
    )


@dataclass
class RenderStats:
    """Per-voxel contribution statistics accumulated over an interval."""

    max_contribution: np.ndarray
    priority: np.ndarray

    @classmethod
    def zeros(cls, n_voxels: int) -> "RenderStats":
        return cls(np.zeros(n_voxels), np.zeros(n_voxels))

    def update(self, samples: SampleSet, pixel_error: np.ndarray | None = None) -> None:
        """Fold one forward pass in: track max T*alpha per voxel and
        accumulate contribution-weighted photometric error as priority."""
        if len(samples.ray) == 0:
            return
        np.maximum.at(self.max_contribution, samples.vox, samples.w)
        if pixel_error is not None:
            err = np.asarray(pixel_error, dtype=np.float64).reshape(-1)
            np.add.at(self.priority, samples.vox, samples.w * err[samples.ray])


def prune_and_subdivide(
    tree: VoxelOctree,
    stats: RenderStats,
    tau_p: float,
    max_new: int,
    level_max: int = morton.MAX_LEVEL,
):
    """Drop voxels with negligible contribution, split the highest-priority.

    Voxels whose maximum per-sample contribution over the interval stayed
    below ``tau_p`` are removed (``tau_p = 0`` removes none). Of the
    survivors, the ``max_new`` largest accumulated priorities below
    ``level_max`` are split into eight children (densities sample the parent
    trilinear field, SH copied).

    Returns ``(new_tree, kept_idx, split_idx)``; the new voxel order is the
    kept voxels (original order) followed by children in octant order, eight
    per split parent, so optimizer state can be remapped.
    """
    keep = stats.max_contribution >= tau_p
    kept_idx = np.flatnonzero(keep)

    can_split = keep & (tree.levels < level_max)
    priorities = np.where(can_split, stats.priority, -np.inf)
    n_split = min(max_new, int(np.count_nonzero(can_split & (stats.priority > 0))))
    if n_split > 0:
        order = np.lexsort((morton.sort_keys(tree.codes, tree.levels), -priorities))
        split_idx = np.sort(order[:n_split])
    else:
        split_idx = np.zeros(0, dtype=np.int64)

    keep_unsplit = keep.copy()
    keep_unsplit[split_idx] = False
    kept_unsplit_idx = np.flatnonzero(keep_unsplit)

    base = VoxelOctree(
        scene_center=tree.scene_center.copy(),
        scene_size=tree.scene_size,
        levels=np.r_[tree.levels[kept_unsplit_idx], tree.levels[split_idx]],
        codes=np.r_[tree.codes[kept_unsplit_idx], tree.codes[split_idx]],
        density=np.vstack([tree.density[kept_unsplit_idx], tree.density[split_idx]]),
        sh0=np.vstack([tree.sh0[kept_unsplit_idx], tree.sh0[split_idx]]),
        sh_rest=np.vstack([tree.sh_rest[kept_unsplit_idx], tree.sh_rest[split_idx]]),
    )
    if len(split_idx):
        mask = np.zeros(len(base), dtype=bool)
        mask[len(kept_unsplit_idx):] = True
        from .svo import subdivide

        base = subdivide(base, mask)
    return base, kept_unsplit_idx, split_idx
