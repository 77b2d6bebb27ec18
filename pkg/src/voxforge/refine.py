"""Multi-view refined depth supervision targets.

For every pixel with trusted rendered depth, a small candidate set is formed
from the rendered depth, its two spatial neighbors, and seeded multiplicative
perturbations ``d * (1 + eps)`` with ``eps ~ Unif(-s/2, s/2)``. Candidates
are backprojected, reprojected into the K nearest views, and scored by
zero-mean NCC between a fixed 7x7 source patch and bilinearly sampled
neighbor patches; the best-scoring candidate becomes the refined depth. A
forward-backward geometric check (reproject into a neighbor, look up the
neighbor's rendered depth, backproject, and reproject into the reference)
rejects pixels whose round-trip error exceeds a pixel threshold, leaving a
sparse, high-precision target map.

The perturbation stream is drawn once per (seed, iteration) for the whole
raster, so results do not depend on pixel scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, project_points, unproject_pixel
from .rasters import load_float_raster, load_mask, sample_bilinear, save_float_raster, save_mask

DEFAULT_PATCH_RADIUS = 3  # 7x7 patches


@dataclass
class RefinedDepthMap:
    depth: np.ndarray
    valid: np.ndarray
    score: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.score = np.asarray(self.score, dtype=np.float64)
        if not (self.depth.shape == self.valid.shape == self.score.shape):
            raise ValueError("rasters must share shape")
        if np.any(self.depth[self.valid] <= 0):
            raise ValueError("valid refined depths must be positive")


def save_refined(path_base: str, refined: RefinedDepthMap) -> None:
    data = np.stack([refined.depth, refined.score], axis=-1)
    save_float_raster(path_base + ".img", np.nan_to_num(data, nan=0.0))
    save_mask(path_base + ".msk", refined.valid)


def load_refined(path_base: str) -> RefinedDepthMap:
    data = load_float_raster(path_base + ".img")
    valid = load_mask(path_base + ".msk").astype(bool)
    depth = data[:, :, 0].astype(np.float64)
    depth[~valid] = np.nan
    return RefinedDepthMap(depth, valid, data[:, :, 1].astype(np.float64))


def nearest_views(cams: list[Camera], reference: int, k: int) -> list[int]:
    """Indices of the K views closest to the reference camera center.

    Distance ties break toward the lower index; the reference is excluded.
    """
    if k >= len(cams):
        raise ValueError("need k < number of views")
    ref_c = cams[reference].center
    dists = [
        (float(np.linalg.norm(c.center - ref_c)), i)
        for i, c in enumerate(cams)
        if i != reference
    ]
    dists.sort()
    return [i for _, i in dists[:k]]


def build_candidates(
    rendered: np.ndarray,
    p: tuple[int, int],
    n_rand: int,
    s: float,
    eps: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Depth candidates for pixel ``p = (u, v)``: anchor, two spatial
    neighbors, and ``n_rand`` multiplicative perturbations.

    Invalid neighbor depths fall back to the anchor so the set always has
    exactly ``3 + n_rand`` positive entries. ``eps`` supplies pre-drawn
    perturbations; otherwise ``rng`` draws them from Unif(-s/2, s/2).
    """
    u, v = p
    h, w = rendered.shape
    d0 = rendered[v, u]
    if not (np.isfinite(d0) and d0 > 0):
        raise ValueError("anchor depth is invalid")

    def _neighbor(vv, uu):
        if 0 <= vv < h and 0 <= uu < w:
            d = rendered[vv, uu]
            if np.isfinite(d) and d > 0:
                return d
        return d0

    if eps is None:
        rng = rng or np.random.default_rng(0)
        eps = rng.uniform(-0.5 * s, 0.5 * s, size=n_rand)
    eps = np.asarray(eps, dtype=np.float64).reshape(n_rand)
    return np.concatenate(
        [[d0, _neighbor(v, u + 1), _neighbor(v + 1, u)], d0 * (1.0 + eps)]
    )


def ncc(patch_a: np.ndarray, patch_b: np.ndarray) -> float:
    """Zero-mean normalized cross-correlation; NaN when either patch has
    zero variance (callers reject such candidates)."""
    a = np.asarray(patch_a, dtype=np.float64).reshape(-1)
    b = np.asarray(patch_b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError("patch sizes differ")
    a = a - a.mean()
    b = b - b.mean()
    na = np.sqrt((a * a).sum())
    nb = np.sqrt((b * b).sum())
    if na <= 0 or nb <= 0:
        return float("nan")
    return float(np.clip((a * b).sum() / (na * nb), -1.0, 1.0))


def _patch_offsets(radius: int):
    dy, dx = np.meshgrid(
        np.arange(-radius, radius + 1), np.arange(-radius, radius + 1), indexing="ij"
    )
    return dx.reshape(-1).astype(np.float64), dy.reshape(-1).astype(np.float64)


def _blurred_source_patch(image, u, v, frac_u, frac_v, radius):
    """Source window blurred to match a neighbor's bilinear smoothing.

    Bilinear sampling at fractional phase f low-passes the neighbor patch
    with a zero-mean two-tap kernel of variance f(1-f). Convolving the
    source window with the symmetric three-tap kernel
    ``[f(1-f)/2, 1-f(1-f), f(1-f)/2]`` per axis matches that kernel's mean
    and variance, so perfectly aligned patches compare blur-to-blur instead
    of sharp-to-blurred (which would bias scores toward integer-aligned
    candidates).
    """
    win = image[v - radius - 1 : v + radius + 2, u - radius - 1 : u + radius + 2]
    au = 0.5 * frac_u * (1.0 - frac_u)
    av = 0.5 * frac_v * (1.0 - frac_v)
    n = 2 * radius + 1
    mid = win[1 : n + 1]
    row = av * win[:n] + (1.0 - 2.0 * av) * mid + av * win[2:]
    return (
        au * row[:, :n]
        + (1.0 - 2.0 * au) * row[:, 1 : n + 1]
        + au * row[:, 2:]
    )


def score_candidate(
    cam: Camera,
    neighbor_cams: list[Camera],
    image: np.ndarray,
    neighbor_images: list[np.ndarray],
    p: tuple[int, int],
    depth: float,
    patch_radius: int = DEFAULT_PATCH_RADIUS,
) -> float:
    """Mean NCC of the candidate over neighbors with a valid warped patch.

    Each neighbor patch is bilinearly sampled on a unit-spaced grid around
    the reprojected point; the source window around ``p`` is convolved with
    that neighbor's bilinear kernel so both patches carry identical
    interpolation smoothing. NaN when no neighbor yields a scoreable patch.
    """
    u, v = p
    if depth <= 0:
        raise ValueError("candidate depth must be positive")
    dx, dy = _patch_offsets(patch_radius)
    h, w = image.shape[:2]
    if not (
        patch_radius + 1 <= u < w - patch_radius - 1
        and patch_radius + 1 <= v < h - patch_radius - 1
    ):
        return float("nan")
    x = unproject_pixel(cam, float(u), float(v), float(depth))
    scores = []
    for ncam, nimg in zip(neighbor_cams, neighbor_images):
        un, vn, zn = project_points(ncam, x)
        if zn <= 0:
            continue
        pu = un + dx
        pv = vn + dy
        vals, ok = sample_bilinear(nimg, pu, pv)
        if not np.all(ok):
            continue
        fu = un - np.floor(un)
        fv = vn - np.floor(vn)
        src = _blurred_source_patch(image, u, v, fu, fv, patch_radius)
        score = ncc(src, vals)
        if np.isfinite(score):
            scores.append(score)
    if not scores:
        return float("nan")
    return float(np.mean(scores))


def refine_depth(
    ref_index: int,
    cams: list[Camera],
    images: list[np.ndarray],
    rendered_depths: list[np.ndarray],
    k: int = 4,
    n_rand: int = 16,
    s: float = 0.04,
    reproj_thresh: float = 1.0,
    patch_radius: int = DEFAULT_PATCH_RADIUS,
    seed: int = 0,
    iteration: int = 0,
) -> RefinedDepthMap:
    """Refined depth map for one reference view (vectorized over pixels).

    ``rendered_depths`` holds one raster per view (NaN marks untrusted
    pixels); the reference raster anchors the candidates and the neighbor
    rasters drive the geometric check. Pixels survive only if some neighbor
    agrees within ``reproj_thresh`` pixels on the forward-backward
    reprojection.
    """
    ref_cam = cams[ref_index]
    ref_img = np.asarray(images[ref_index], dtype=np.float64)
    depth = np.asarray(rendered_depths[ref_index], dtype=np.float64)
    h, w = depth.shape
    out_depth = np.full((h, w), np.nan)
    out_valid = np.zeros((h, w), dtype=bool)
    out_score = np.full((h, w), np.nan)
    result = RefinedDepthMap(out_depth, out_valid, out_score)

    if k <= 0:
        return result
    neigh = nearest_views(cams, ref_index, k)

    r = patch_radius
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    usable = np.isfinite(depth) & (depth > 0)
    usable[: r + 1, :] = usable[-(r + 1):, :] = False
    usable[:, : r + 1] = usable[:, -(r + 1):] = False
    if not np.any(usable):
        return result

    pu = uu[usable].astype(np.float64)
    pv = vv[usable].astype(np.float64)
    d0 = depth[usable]
    n_pix = len(d0)

    # Candidate matrix (n_pix, 3 + n_rand): anchor, x/y neighbors, jitters.
    rng = np.random.default_rng([seed & 0x7FFFFFFF, iteration])
    eps = rng.uniform(-0.5 * s, 0.5 * s, size=(h, w, n_rand))
    dx_n = np.where(
        (uu[usable] + 1 < w)
        & np.isfinite(depth[pv.astype(int), np.minimum(pu.astype(int) + 1, w - 1)]),
        depth[pv.astype(int), np.minimum(pu.astype(int) + 1, w - 1)],
        d0,
    )
    dy_n = np.where(
        (vv[usable] + 1 < h)
        & np.isfinite(depth[np.minimum(pv.astype(int) + 1, h - 1), pu.astype(int)]),
        depth[np.minimum(pv.astype(int) + 1, h - 1), pu.astype(int)],
        d0,
    )
    dx_n = np.where(dx_n > 0, dx_n, d0)
    dy_n = np.where(dy_n > 0, dy_n, d0)
    cands = np.concatenate(
        [
            d0[:, None],
            dx_n[:, None],
            dy_n[:, None],
            d0[:, None] * (1.0 + eps[usable]),
        ],
        axis=1,
    )
    n_cand = cands.shape[1]

    # Shifted source windows so each neighbor's bilinear smoothing can be
    # matched on the source side (see _blurred_source_patch).
    offs_dx, offs_dy = _patch_offsets(r)
    su = (pu[:, None] + offs_dx[None, :]).astype(np.int64)
    sv = (pv[:, None] + offs_dy[None, :]).astype(np.int64)
    shifted = {
        (i, j): ref_img[sv + j, su + i].reshape(n_pix, -1)
        for i in (-1, 0, 1)
        for j in (-1, 0, 1)
    }

    score_sum = np.zeros((n_pix, n_cand))
    score_cnt = np.zeros((n_pix, n_cand), dtype=np.int64)
    for ci in range(n_cand):
        x = unproject_pixel(ref_cam, pu, pv, cands[:, ci])
        for ni in neigh:
            un, vn, zn = project_points(cams[ni], x)
            okz = zn > 0
            pu_n = un[:, None] + offs_dx[None, :]
            pv_n = vn[:, None] + offs_dy[None, :]
            vals, ok = sample_bilinear(np.asarray(images[ni], dtype=np.float64), pu_n, pv_n)
            ok_patch = okz & ok.all(axis=1)
            patch = vals.reshape(n_pix, -1)
            patch = patch - patch.mean(axis=1, keepdims=True)
            pn = np.sqrt((patch * patch).sum(axis=1))

            fu = np.where(okz, un - np.floor(un), 0.0)
            fv = np.where(okz, vn - np.floor(vn), 0.0)
            au = (0.5 * fu * (1.0 - fu))[:, None]
            av = (0.5 * fv * (1.0 - fv))[:, None]
            bu = 1.0 - 2.0 * au
            bv = 1.0 - 2.0 * av
            src = (
                av * (au * shifted[(-1, -1)] + bu * shifted[(0, -1)] + au * shifted[(1, -1)])
                + bv * (au * shifted[(-1, 0)] + bu * shifted[(0, 0)] + au * shifted[(1, 0)])
                + av * (au * shifted[(-1, 1)] + bu * shifted[(0, 1)] + au * shifted[(1, 1)])
            )
            src = src - src.mean(axis=1, keepdims=True)
            sn = np.sqrt((src * src).sum(axis=1))

            good = ok_patch & (pn > 1e-12) & (sn > 1e-12)
            sc = np.einsum("pk,pk->p", src, patch) / np.maximum(sn * pn, 1e-300)
            score_sum[good, ci] += np.clip(sc[good], -1.0, 1.0)
            score_cnt[good, ci] += 1

    with np.errstate(invalid="ignore"):
        mean_score = np.where(score_cnt > 0, score_sum / np.maximum(score_cnt, 1), -np.inf)
    best_ci = np.argmax(mean_score, axis=1)
    best_score = mean_score[np.arange(n_pix), best_ci]
    best_depth = cands[np.arange(n_pix), best_ci]
    accepted = np.isfinite(best_score) & (best_score > -np.inf)

    # Forward-backward geometric verification of the winning candidate.
    x_best = unproject_pixel(ref_cam, pu, pv, best_depth)
    min_err = np.full(n_pix, np.inf)
    for ni in neigh:
        un, vn, zn = project_points(cams[ni], x_best)
        dn, ok = sample_bilinear(np.asarray(rendered_depths[ni], dtype=np.float64), un, vn)
        ok = ok & (zn > 0) & (dn > 0)
        if not np.any(ok):
            continue
        xb = unproject_pixel(
            cams[ni],
            np.where(ok, un, 0.0),
            np.where(ok, vn, 0.0),
            np.where(ok, dn, 1.0),
        )
        ur, vr, zr = project_points(ref_cam, xb)
        err = np.where(
            ok & (zr > 0), np.hypot(ur - pu, vr - pv), np.inf
        )
        min_err = np.minimum(min_err, err)
    accepted &= min_err <= reproj_thresh

    out_depth[pv[accepted].astype(int), pu[accepted].astype(int)] = best_depth[accepted]
    out_valid[pv[accepted].astype(int), pu[accepted].astype(int)] = True
    out_score[pv[accepted].astype(int), pu[accepted].astype(int)] = best_score[accepted]
    return RefinedDepthMap(out_depth, out_valid, out_score)
