"""Sparse voxel octree: storage, geometry, LOD unprojection, color merging.

The octree is stored as a flat struct-of-arrays keyed by ``(level, code)``
Morton paths (see :mod:`voxforge.morton`). Occupancy is leaf-only: no stored
voxel is a strict ancestor of another. Each voxel carries eight corner
densities (pre-activation, corner order lexicographic in (x, y, z) with z
fastest) and spherical-harmonic color coefficients; rendering uses only the
degree-0 band, ``color = 0.5 + C0 * sh0``.

Geometry of a level-``l`` cell with integer coordinates (i, j, k):
side ``s_l = S / 2**l``, center
``c_scene + s_l * ((i, j, k) + 0.5 - 0.5 * 2**l)``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import morton
from .camera import Camera, footprint_areas, unproject_pixel
from .errors import DataFormatError

logger = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814  # degree-0 SH basis constant, 1 / (2 sqrt(pi))

DEFAULT_LEVEL_MAX = 16

# Corner m has offsets ((m >> 2) & 1, (m >> 1) & 1, m & 1).
CORNER_OFFSETS = np.array(
    [
        [0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1],
        [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1],
    ],
    dtype=np.int64,
)

_SVO_MAGIC = b"SVO1"


def sh0_to_color(sh0: np.ndarray) -> np.ndarray:
    return 0.5 + SH_C0 * np.asarray(sh0, dtype=np.float64)


def color_to_sh0(color: np.ndarray) -> np.ndarray:
    return (np.asarray(color, dtype=np.float64) - 0.5) / SH_C0


@dataclass(frozen=True)
class Voxel:
    """Single-voxel view, mainly for tests and debugging."""

    path: morton.MortonPath
    corner_density: np.ndarray
    sh0: np.ndarray
    sh_rest: np.ndarray


@dataclass
class VoxelOctree:
    """Flat, leaf-only sparse voxel octree.

    ``metadata`` holds non-serialized side information (per-voxel arrays such
    as fusion contribution counts, or scalar counters from construction).
    """

    scene_center: np.ndarray
    scene_size: float
    levels: np.ndarray
    codes: np.ndarray
    density: np.ndarray
    sh0: np.ndarray
    sh_rest: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scene_center = np.asarray(self.scene_center, dtype=np.float64).reshape(3)
        self.scene_size = float(self.scene_size)
        self.levels = np.asarray(self.levels, dtype=np.uint8)
        self.codes = np.asarray(self.codes, dtype=np.uint64)
        n = len(self.levels)
        self.density = np.asarray(self.density, dtype=np.float64).reshape(n, 8)
        self.sh0 = np.asarray(self.sh0, dtype=np.float64).reshape(n, 3)
        sh_rest = np.asarray(self.sh_rest, dtype=np.float64)
        if sh_rest.size == 0:
            k = sh_rest.shape[1] if sh_rest.ndim == 2 else 0
            self.sh_rest = sh_rest.reshape(n, k)
        else:
            self.sh_rest = sh_rest.reshape(n, -1)
        if self.scene_size <= 0:
            raise ValueError("scene_size must be positive")

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def sh_rest_len(self) -> int:
        return self.sh_rest.shape[1]

    def voxel_sizes(self) -> np.ndarray:
        return self.scene_size / np.exp2(self.levels.astype(np.float64))

    def cell_min_corners(self) -> np.ndarray:
        i, j, k = morton.decode(self.codes, self.levels)
        ijk = np.stack([i, j, k], axis=-1).astype(np.float64)
        s = self.voxel_sizes()[:, None]
        return (self.scene_center - 0.5 * self.scene_size) + ijk * s

    def voxel_centers(self) -> np.ndarray:
        return self.cell_min_corners() + 0.5 * self.voxel_sizes()[:, None]

    def corner_positions(self) -> np.ndarray:
        """World positions of all voxel corners, shape (N, 8, 3)."""
        mins = self.cell_min_corners()
        s = self.voxel_sizes()
        return mins[:, None, :] + CORNER_OFFSETS[None, :, :] * s[:, None, None]

    def corner_keys(self) -> np.ndarray:
        """Integer corner coordinates at MAX_LEVEL granularity, (N, 8, 3).

        Corners shared between voxels (of any levels) get identical keys,
        which makes grid-point deduplication exact.
        """
        i, j, k = morton.decode(self.codes, self.levels)
        ijk = np.stack([i, j, k], axis=-1).astype(np.int64)
        shift = (morton.MAX_LEVEL - self.levels.astype(np.int64))[:, None]
        base = ijk << shift
        step = (np.int64(1) << shift)[:, :, None]
        return base[:, None, :] + CORNER_OFFSETS[None, :, :] * step

    def voxel(self, idx: int) -> Voxel:
        return Voxel(
            path=morton.MortonPath(int(self.levels[idx]), int(self.codes[idx])),
            corner_density=self.density[idx].copy(),
            sh0=self.sh0[idx].copy(),
            sh_rest=self.sh_rest[idx].copy(),
        )

    def colors(self) -> np.ndarray:
        return sh0_to_color(self.sh0)

    def canonical(self) -> "VoxelOctree":
        """Copy with voxels sorted by (level, code); order is deterministic."""
        order = np.lexsort((self.codes, self.levels))
        return VoxelOctree(
            scene_center=self.scene_center.copy(),
            scene_size=self.scene_size,
            levels=self.levels[order],
            codes=self.codes[order],
            density=self.density[order],
            sh0=self.sh0[order],
            sh_rest=self.sh_rest[order],
            metadata={
                k: (v[order] if isinstance(v, np.ndarray) and len(v) == len(self) else v)
                for k, v in self.metadata.items()
            },
        )

    def validate(self) -> None:
        """Raise ValueError on duplicate paths or ancestor/descendant pairs."""
        if np.any(self.codes >> (np.uint64(3) * self.levels.astype(np.uint64))):
            raise ValueError("code has bits above 3*level")
        pairs = set(zip(self.levels.tolist(), self.codes.tolist()))
        if len(pairs) != len(self):
            raise ValueError("duplicate (level, code) voxel")
        by_level = {
            int(lv): set(self.codes[self.levels == lv].tolist())
            for lv in np.unique(self.levels)
        }
        for lv, codes in sorted(by_level.items()):
            for anc_lv, anc_codes in by_level.items():
                if anc_lv >= lv:
                    continue
                shifted = {c >> (3 * (lv - anc_lv)) for c in codes}
                if shifted & anc_codes:
                    raise ValueError("octree is not leaf-only")

    def find_leaves(self, points: np.ndarray) -> np.ndarray:
        """Index of the leaf containing each point, or -1 for empty space."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.full(len(points), -1, dtype=np.int64)
        smin = self.scene_center - 0.5 * self.scene_size
        for lv in np.unique(self.levels):
            s = self.scene_size / (1 << int(lv))
            ijk = np.floor((points - smin) / s).astype(np.int64)
            ok = np.all((ijk >= 0) & (ijk < (1 << int(lv))), axis=1)
            if not np.any(ok):
                continue
            codes = morton.encode(
                ijk[ok, 0], ijk[ok, 1], ijk[ok, 2], int(lv)
            )
            idx_level = np.flatnonzero(self.levels == lv)
            level_codes = self.codes[idx_level]
            order = np.argsort(level_codes)
            pos = np.searchsorted(level_codes[order], codes)
            pos = np.clip(pos, 0, len(order) - 1)
            hit = level_codes[order][pos] == codes
            sel = np.flatnonzero(ok)[hit]
            out[sel] = idx_level[order[pos[hit]]]
        return out


def empty_octree(scene_center, scene_size, sh_rest_len: int = 0) -> VoxelOctree:
    return VoxelOctree(
        scene_center=scene_center,
        scene_size=scene_size,
        levels=np.zeros(0, dtype=np.uint8),
        codes=np.zeros(0, dtype=np.uint64),
        density=np.zeros((0, 8)),
        sh0=np.zeros((0, 3)),
        sh_rest=np.zeros((0, sh_rest_len)),
    )


def uniform_octree(
    scene_center,
    scene_size,
    level: int,
    density_init: float = 0.0,
    color=(0.5, 0.5, 0.5),
    sh_rest_len: int = 0,
) -> VoxelOctree:
    """Dense grid of all 8**level cells with constant density and color."""
    n = 8 ** level
    tree = make_octree(
        scene_center,
        scene_size,
        levels=np.full(n, level, dtype=np.uint8),
        codes=np.arange(n, dtype=np.uint64),
        density=np.full((n, 8), float(density_init)),
        sh0=np.tile(color_to_sh0(np.asarray(color, dtype=np.float64)), (n, 1)),
        sh_rest_len=sh_rest_len,
    )
    return tree


def make_octree(scene_center, scene_size, levels, codes, *, density=None,
                sh0=None, sh_rest=None, sh_rest_len: int = 0) -> VoxelOctree:
    levels = np.asarray(levels, dtype=np.uint8)
    n = len(levels)
    return VoxelOctree(
        scene_center=scene_center,
        scene_size=scene_size,
        levels=levels,
        codes=np.asarray(codes, dtype=np.uint64),
        density=np.zeros((n, 8)) if density is None else density,
        sh0=np.zeros((n, 3)) if sh0 is None else sh0,
        sh_rest=np.zeros((n, sh_rest_len)) if sh_rest is None else sh_rest,
    )


def voxel_center(tree: VoxelOctree, path: morton.MortonPath) -> np.ndarray:
    """World center of the cell addressed by ``path`` (Eq. of the cell grid)."""
    i, j, k = morton.decode(np.uint64(path.code), path.level)
    g = np.array([int(i) + 0.5, int(j) + 0.5, int(k) + 0.5])
    s = tree.scene_size / (1 << path.level)
    return tree.scene_center + s * (g - 0.5 * (1 << path.level))


def level_for_footprint(S: float, area: float, level_max: int) -> int:
    """Deepest level whose squared voxel side still covers ``area``.

    Returns ``max{l : (S/2**l)**2 >= area}`` clamped to ``[0, level_max]``;
    areas of the root scale or larger map to 0.
    """
    if not area > 0:
        raise ValueError("footprint area must be positive")
    if area >= S * S:
        return 0
    guess = int(np.floor(0.5 * np.log2(S * S / area)))
    lv = min(max(guess - 1, 0), level_max)
    while lv < level_max and (S / (1 << (lv + 1))) ** 2 >= area:
        lv += 1
    while lv > 0 and (S / (1 << lv)) ** 2 < area:
        lv -= 1
    return lv


def _levels_for_footprints(S: float, areas: np.ndarray, level_max: int) -> np.ndarray:
    """Vectorized :func:`level_for_footprint` for positive areas."""
    ratio = S * S / areas
    guess = np.floor(0.5 * np.log2(np.maximum(ratio, 1.0))).astype(np.int64)
    best = np.zeros_like(guess)
    for delta in (-1, 0, 1):
        cand = np.clip(guess + delta, 0, level_max)
        ok = (S / np.exp2(cand.astype(np.float64))) ** 2 >= areas
        best = np.where(ok & (cand > best), cand, best)
    return best


def min_occupancy(level_min: int, level_parent: int) -> int:
    """Minimum member count required to merge into a level-``level_parent``
    cell whose finest member sits at ``level_min``: ``2**(max(dl, 0) + 1)``."""
    return 1 << (max(level_min - level_parent, 0) + 1)


def lod_unproject(
    cam: Camera,
    prior,
    scene_center,
    scene_size: float,
    merge_threshold: float = 0.0,
    level_max: int = DEFAULT_LEVEL_MAX,
    sh_rest_len: int = 0,
    image: np.ndarray | None = None,
) -> VoxelOctree:
    """Build a per-view octree by unprojecting every valid prior pixel.

    Each pixel is lifted to the world point at its prior depth and assigned
    the deepest level whose voxel covers the pixel footprint. Where pixels
    with different target levels land in nested cells, the coarser pixels are
    pushed down to the finest requested level in that region so occupancy
    stays leaf-only. Cell colors average the contributing pixel colors;
    ``merge_threshold > 0`` then merges low-deviation sibling groups
    bottom-up (see :func:`merge_by_color`).

    ``image`` supplies per-pixel colors (H, W, 3); mid-gray when omitted.
    """
    scene_center = np.asarray(scene_center, dtype=np.float64).reshape(3)
    depth = np.asarray(prior.depth, dtype=np.float64)
    h, w = depth.shape
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))

    valid = np.isfinite(depth) & (depth > 0)
    n_invalid = int(valid.size - valid.sum())
    if not np.any(valid):
        return empty_octree(scene_center, scene_size, sh_rest_len)

    u = uu[valid].astype(np.float64)
    v = vv[valid].astype(np.float64)
    d = depth[valid]

    areas = footprint_areas(cam, d)
    target = _levels_for_footprints(scene_size, areas, level_max)
    points = unproject_pixel(cam, u, v, d)

    smin = scene_center - 0.5 * scene_size
    inside = np.all((points >= smin) & (points < smin + scene_size), axis=1)
    n_outside = int(len(points) - inside.sum())
    if n_outside:
        logger.info("lod_unproject: %d pixels outside the root cell", n_outside)
    if not np.any(inside):
        tree = empty_octree(scene_center, scene_size, sh_rest_len)
        tree.metadata.update(
            pixels_outside=n_outside, pixels_invalid_depth=n_invalid
        )
        return tree

    points = points[inside]
    target = target[inside]
    if image is not None:
        colors = np.asarray(image, dtype=np.float64)[valid][inside]
    else:
        colors = np.full((len(points), 3), 0.5)

    s_fine = scene_size / (1 << level_max)
    ijk = np.clip(
        np.floor((points - smin) / s_fine).astype(np.int64),
        0,
        (1 << level_max) - 1,
    )
    codes_fine = morton.encode(ijk[:, 0], ijk[:, 1], ijk[:, 2], level_max)

    order = np.argsort(codes_fine, kind="stable")
    codes_sorted = codes_fine[order]
    target_sorted = target[order]
    final_level = np.full(len(order), -1, dtype=np.int64)
    for lv in range(level_max + 1):
        pfx = codes_sorted >> np.uint64(3 * (level_max - lv))
        new_group = np.r_[True, pfx[1:] != pfx[:-1]]
        starts = np.flatnonzero(new_group)
        gmax = np.maximum.reduceat(target_sorted, starts)
        elem_max = gmax[np.cumsum(new_group) - 1]
        take = (final_level < 0) & (elem_max <= lv)
        final_level[take] = lv
        if np.all(final_level >= 0):
            break

    cell_codes = codes_sorted >> (
        np.uint64(3) * (level_max - final_level).astype(np.uint64)
    )
    colors_sorted = colors[order]

    # Group contributions by (level, code) and average colors.
    key_order = np.lexsort((cell_codes, final_level))
    lv_s = final_level[key_order]
    cd_s = cell_codes[key_order]
    cl_s = colors_sorted[key_order]
    new_group = np.r_[True, (lv_s[1:] != lv_s[:-1]) | (cd_s[1:] != cd_s[:-1])]
    starts = np.flatnonzero(new_group)
    counts = np.diff(np.r_[starts, len(lv_s)])
    mean_colors = np.add.reduceat(cl_s, starts, axis=0) / counts[:, None]

    tree = make_octree(
        scene_center,
        scene_size,
        levels=lv_s[starts],
        codes=cd_s[starts],
        sh0=color_to_sh0(mean_colors),
        sh_rest_len=sh_rest_len,
    )
    if merge_threshold > 0:
        tree = merge_by_color(tree, merge_threshold)
    tree = tree.canonical()
    tree.metadata.update(pixels_outside=n_outside, pixels_invalid_depth=n_invalid)
    return tree


def merge_by_color(tree: VoxelOctree, t: float) -> VoxelOctree:
    """Merge complete sibling groups whose colors agree within ``t``.

    Processes one level per pass, deepest first, repeating until a fixpoint:
    the children of a parent cell merge into it when (a) the parent contains
    no deeper descendants, (b) at least ``min_occupancy`` children are
    present, and (c) the maximum distance of any child color from the group
    mean is below ``t``. The merged parent takes the mean color (and mean
    corner densities) of its children.
    """
    levels = tree.levels.astype(np.int64)
    codes = tree.codes.copy()
    density = tree.density.copy()
    sh0 = tree.sh0.copy()
    sh_rest = tree.sh_rest.copy()

    changed = True
    while changed:
        changed = False
        for lv in sorted(np.unique(levels).tolist(), reverse=True):
            if lv == 0:
                continue
            at = np.flatnonzero(levels == lv)
            if len(at) == 0:
                continue
            deeper = levels > lv
            blocked = set()
            if np.any(deeper):
                blocked = set(
                    (codes[deeper] >> (np.uint64(3) * (levels[deeper] - (lv - 1)).astype(np.uint64))).tolist()
                )

            parent_codes = codes[at] >> np.uint64(3)
            order = np.argsort(parent_codes, kind="stable")
            pc_sorted = parent_codes[order]
            idx_sorted = at[order]
            group_start = np.r_[True, pc_sorted[1:] != pc_sorted[:-1]]
            starts = np.flatnonzero(group_start)
            counts = np.diff(np.r_[starts, len(pc_sorted)])

            need = min_occupancy(lv, lv - 1)
            remove = []
            new_rows = []
            for s0, cnt in zip(starts, counts):
                if cnt < need:
                    continue
                pcode = pc_sorted[s0]
                if int(pcode) in blocked:
                    continue
                members = idx_sorted[s0 : s0 + cnt]
                cols = sh0_to_color(sh0[members])
                cbar = cols.mean(axis=0)
                dev = np.max(np.linalg.norm(cols - cbar, axis=1))
                if dev < t:
                    remove.append(members)
                    new_rows.append(
                        (
                            lv - 1,
                            pcode,
                            density[members].mean(axis=0),
                            sh0[members].mean(axis=0),
                            sh_rest[members].mean(axis=0),
                        )
                    )
            if new_rows:
                changed = True
                drop = np.concatenate(remove)
                keep = np.ones(len(levels), dtype=bool)
                keep[drop] = False
                levels = np.r_[levels[keep], [r[0] for r in new_rows]]
                codes = np.r_[codes[keep], np.array([r[1] for r in new_rows], dtype=np.uint64)]
                density = np.vstack([density[keep], [r[2] for r in new_rows]])
                sh0 = np.vstack([sh0[keep], [r[3] for r in new_rows]])
                sh_rest = np.vstack([sh_rest[keep], [r[4] for r in new_rows]])

    out = VoxelOctree(
        scene_center=tree.scene_center.copy(),
        scene_size=tree.scene_size,
        levels=levels.astype(np.uint8),
        codes=codes,
        density=density,
        sh0=sh0,
        sh_rest=sh_rest,
    )
    return out.canonical()


# Trilinear weights of each child corner in the parent corner basis:
# child corner (octant o, corner m) sits at parent-local (o + m) / 2.
def _subdivision_weights() -> np.ndarray:
    W = np.zeros((8, 8, 8))
    for o in range(8):
        ov = CORNER_OFFSETS[o]
        for m in range(8):
            mv = CORNER_OFFSETS[m]
            pos = (ov + mv) / 2.0
            for p in range(8):
                pv = CORNER_OFFSETS[p]
                wgt = 1.0
                for ax in range(3):
                    wgt *= pos[ax] if pv[ax] else (1.0 - pos[ax])
                W[o, m, p] = wgt
    return W


SUBDIV_WEIGHTS = _subdivision_weights()


def subdivide(tree: VoxelOctree, mask: np.ndarray) -> VoxelOctree:
    """Split the masked voxels into their eight children.

    Child corner densities sample the parent's trilinear field (so the
    represented density field is unchanged); SH coefficients are copied.
    """
    mask = np.asarray(mask, dtype=bool)
    if not np.any(mask):
        return tree
    if np.any(tree.levels[mask] >= morton.MAX_LEVEL):
        raise ValueError("cannot subdivide below the maximum level")
    keep = ~mask
    par_levels = tree.levels[mask].astype(np.uint64)
    par_codes = tree.codes[mask]
    octants = np.arange(8, dtype=np.uint64)
    child_codes = ((par_codes[:, None] << np.uint64(3)) | octants[None, :]).reshape(-1)
    child_levels = np.repeat(par_levels + np.uint64(1), 8).astype(np.uint8)
    child_density = np.einsum(
        "omp,np->nom", SUBDIV_WEIGHTS, tree.density[mask]
    ).reshape(-1, 8)
    child_sh0 = np.repeat(tree.sh0[mask], 8, axis=0)
    child_sh_rest = np.repeat(tree.sh_rest[mask], 8, axis=0)

    return VoxelOctree(
        scene_center=tree.scene_center.copy(),
        scene_size=tree.scene_size,
        levels=np.r_[tree.levels[keep], child_levels],
        codes=np.r_[tree.codes[keep], child_codes],
        density=np.vstack([tree.density[keep], child_density]),
        sh0=np.vstack([tree.sh0[keep], child_sh0]),
        sh_rest=np.vstack([tree.sh_rest[keep], child_sh_rest]),
    )


def save_octree(path, tree: VoxelOctree) -> None:
    """Write the ``SVO1`` binary format (bit-exact round trip)."""
    k = tree.sh_rest_len
    with open(path, "wb") as f:
        f.write(_SVO_MAGIC)
        f.write(
            struct.pack(
                "<dddd",
                tree.scene_center[0],
                tree.scene_center[1],
                tree.scene_center[2],
                tree.scene_size,
            )
        )
        f.write(struct.pack("<QI", len(tree), k))
        rec = _record_dtype(k)
        body = np.zeros(len(tree), dtype=rec)
        body["level"] = tree.levels
        body["code"] = tree.codes
        body["density"] = tree.density.astype("<f4")
        body["sh0"] = tree.sh0.astype("<f4")
        if k:
            body["sh_rest"] = tree.sh_rest.astype("<f4")
        f.write(body.tobytes())


def load_octree(path) -> VoxelOctree:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 48 or blob[:4] != _SVO_MAGIC:
        raise DataFormatError(f"{path}: not an SVO1 octree")
    cx, cy, cz, size = struct.unpack("<dddd", blob[4:36])
    count, k = struct.unpack("<QI", blob[36:48])
    rec = _record_dtype(k)
    expect = 48 + rec.itemsize * count
    if len(blob) != expect:
        raise DataFormatError(
            f"{path}: truncated octree ({len(blob)} bytes, expected {expect})"
        )
    body = np.frombuffer(blob[48:], dtype=rec)
    tree = VoxelOctree(
        scene_center=np.array([cx, cy, cz]),
        scene_size=size,
        levels=body["level"].copy(),
        codes=body["code"].copy(),
        density=body["density"].astype(np.float64),
        sh0=body["sh0"].astype(np.float64),
        sh_rest=body["sh_rest"].astype(np.float64) if k else np.zeros((count, 0)),
    )
    return tree


def _record_dtype(sh_rest_len: int) -> np.dtype:
    fields = [
        ("level", "<u1"),
        ("code", "<u8"),
        ("density", "<f4", (8,)),
        ("sh0", "<f4", (3,)),
    ]
    if sh_rest_len:
        fields.append(("sh_rest", "<f4", (sh_rest_len,)))
    return np.dtype(fields)
