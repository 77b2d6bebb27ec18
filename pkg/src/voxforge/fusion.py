"""Topology-aligned fusion of per-view octrees.

Two stages: alignment refines every tree to the finest representation any
other tree uses for the same spatial cell (children inherit the parent's
color and sample its trilinear density field), then aggregation unions the
aligned trees and averages the attributes of voxels sharing a cell.

After alignment no voxel in any tree is a strict Morton-prefix ancestor of a
voxel in another tree, so every occupied cell is identified by the same
``(level, code)`` across all views that cover it.
"""

from __future__ import annotations

import numpy as np

from . import svo
from .svo import VoxelOctree


def _check_compatible(trees: list[VoxelOctree]) -> None:
    if not trees:
        raise ValueError("need at least one octree")
    ref = trees[0]
    for t in trees[1:]:
        if t.scene_size != ref.scene_size or not np.array_equal(
            t.scene_center, ref.scene_center
        ):
            raise ValueError("incompatible octrees")


def _ancestor_codes(trees: list[VoxelOctree]) -> dict[int, np.ndarray]:
    """Codes, per level, of cells that strictly contain a voxel of any tree."""
    acc: dict[int, list[np.ndarray]] = {}
    for tree in trees:
        for lv in np.unique(tree.levels):
            lv = int(lv)
            codes = tree.codes[tree.levels == lv]
            for anc in range(lv):
                acc.setdefault(anc, []).append(
                    codes >> np.uint64(3 * (lv - anc))
                )
    return {lv: np.unique(np.concatenate(parts)) for lv, parts in acc.items()}


def align_topology(trees: list[VoxelOctree]) -> list[VoxelOctree]:
    """Refine each tree to the finest common refinement of the input set.

    A voxel is subdivided (recursively) whenever some other tree stores
    strictly deeper voxels inside its cell. Only trees that actually cover a
    region participate in refining it. Children created here are flagged in
    ``metadata['align_subdivided']``.
    """
    _check_compatible(trees)
    ancestors = _ancestor_codes(trees)
    out = []
    for tree in trees:
        cur = tree
        flags = np.zeros(len(cur), dtype=bool)
        while True:
            need = np.zeros(len(cur), dtype=bool)
            for lv, codes in ancestors.items():
                sel = cur.levels == lv
                if np.any(sel):
                    need[sel] = np.isin(cur.codes[sel], codes)
            if not np.any(need):
                break
            n_new = 8 * int(need.sum())
            cur = svo.subdivide(cur, need)
            flags = np.r_[flags[~need], np.ones(n_new, dtype=bool)]
        cur = VoxelOctree(
            scene_center=cur.scene_center,
            scene_size=cur.scene_size,
            levels=cur.levels,
            codes=cur.codes,
            density=cur.density,
            sh0=cur.sh0,
            sh_rest=cur.sh_rest,
            metadata={"align_subdivided": flags},
        ).canonical()
        out.append(cur)
    return out


def aggregate_features(aligned: list[VoxelOctree]) -> VoxelOctree:
    """Union the aligned trees, averaging attributes of shared cells.

    Output attributes are the arithmetic means over the views contributing to
    each cell; the number of contributors is kept in
    ``metadata['contributions']``.
    """
    _check_compatible(aligned)
    ref = aligned[0]
    k = ref.sh_rest_len
    if all(len(t) == 0 for t in aligned):
        return svo.empty_octree(ref.scene_center, ref.scene_size, k)

    levels = np.concatenate([t.levels for t in aligned])
    codes = np.concatenate([t.codes for t in aligned])
    density = np.vstack([t.density for t in aligned])
    sh0 = np.vstack([t.sh0 for t in aligned])
    sh_rest = np.vstack([t.sh_rest for t in aligned])

    order = np.lexsort((codes, levels))
    levels, codes = levels[order], codes[order]
    density, sh0, sh_rest = density[order], sh0[order], sh_rest[order]

    new_group = np.r_[
        True, (levels[1:] != levels[:-1]) | (codes[1:] != codes[:-1])
    ]
    starts = np.flatnonzero(new_group)
    counts = np.diff(np.r_[starts, len(levels)]).astype(np.float64)

    fused = VoxelOctree(
        scene_center=ref.scene_center.copy(),
        scene_size=ref.scene_size,
        levels=levels[starts],
        codes=codes[starts],
        density=np.add.reduceat(density, starts, axis=0) / counts[:, None],
        sh0=np.add.reduceat(sh0, starts, axis=0) / counts[:, None],
        sh_rest=(
            np.add.reduceat(sh_rest, starts, axis=0) / counts[:, None]
            if k
            else np.zeros((len(starts), 0))
        ),
        metadata={"contributions": counts.astype(np.int64)},
    )
    return fused


def fuse(trees: list[VoxelOctree]) -> VoxelOctree:
    """Topology alignment followed by feature aggregation."""
    return aggregate_features(align_topology(trees))
