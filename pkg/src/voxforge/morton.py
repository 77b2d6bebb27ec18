"""Morton (Z-order) path encoding for the sparse voxel octree.

Conventions, pinned by the test suite:

* A path is a pair ``(level, code)``. Level 0 is the root cell (the whole
  scene cube); ``code`` then has no meaningful bits.
* Each level contributes one 3-bit child index ``(x << 2) | (y << 1) | z``,
  so x is the most significant axis bit and z the least.
* The root-level group sits in the highest meaningful bits: the prefix of a
  level-``l`` code at level ``L <= l`` is ``code >> 3*(l - L)``, which is the
  code of the enclosing level-``L`` cell.
* Equivalently ``code = interleave(i, j, k)`` of the integer cell coordinates
  at that level, with bit ``t`` of ``i`` landing at bit ``3*t + 2``.

Levels are capped at MAX_LEVEL = 20 so codes fit in 60 of 64 bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_LEVEL = 20

# Masks with one axis bit set in every 3-bit group of a 60-bit code.
_AXIS_MASK_Z = np.uint64(0o111111111111111111111)
_AXIS_MASK_Y = np.uint64(_AXIS_MASK_Z << np.uint64(1))
_AXIS_MASK_X = np.uint64(_AXIS_MASK_Z << np.uint64(2))


@dataclass(frozen=True)
class MortonPath:
    """Octree cell address: level plus Morton-encoded root-to-cell path."""

    level: int
    code: int

    def __post_init__(self) -> None:
        if not 0 <= self.level <= MAX_LEVEL:
            raise ValueError(f"level {self.level} outside [0, {MAX_LEVEL}]")
        if self.code < 0 or self.code >> (3 * self.level):
            raise ValueError(
                f"code {self.code:#x} has bits above 3*level={3 * self.level}"
            )


def _spread_bits(v: np.ndarray) -> np.ndarray:
    """Spread the low 21 bits of each uint64 so bit t moves to bit 3*t."""
    v = v.astype(np.uint64)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`_spread_bits`."""
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def encode(i, j, k, level) -> np.ndarray:
    """Morton codes of integer cell coordinates ``(i, j, k)`` at ``level``.

    Accepts scalars or arrays; coordinates must lie in ``[0, 2**level)``.
    """
    i = np.asarray(i, dtype=np.uint64)
    j = np.asarray(j, dtype=np.uint64)
    k = np.asarray(k, dtype=np.uint64)
    level = np.asarray(level)
    if np.any(level > MAX_LEVEL):
        raise ValueError(f"level exceeds {MAX_LEVEL}")
    n = np.uint64(1) << level.astype(np.uint64)
    if np.any(i >= n) or np.any(j >= n) or np.any(k >= n):
        raise ValueError("cell coordinate out of range for level")
    code = (
        (_spread_bits(i) << np.uint64(2))
        | (_spread_bits(j) << np.uint64(1))
        | _spread_bits(k)
    )
    return code


def decode(code, level):
    """Integer cell coordinates ``(i, j, k)`` of Morton codes at ``level``."""
    code = np.asarray(code, dtype=np.uint64)
    i = _compact_bits(code >> np.uint64(2))
    j = _compact_bits(code >> np.uint64(1))
    k = _compact_bits(code)
    return i, j, k


def child(path: MortonPath, index: int) -> MortonPath:
    """Child path for 3-bit octant ``index = (x << 2) | (y << 1) | z``."""
    if not 0 <= index < 8:
        raise ValueError("child index must be in [0, 8)")
    if path.level >= MAX_LEVEL:
        raise ValueError("cannot descend below the maximum level")
    return MortonPath(path.level + 1, (path.code << 3) | index)


def parent(path: MortonPath) -> MortonPath:
    """Enclosing cell one level up; the root has no parent."""
    if path.level == 0:
        raise ValueError("root path has no parent")
    return MortonPath(path.level - 1, path.code >> 3)


def prefix(path: MortonPath, level: int) -> MortonPath:
    """Enclosing cell at the given coarser (or equal) level."""
    if not 0 <= level <= path.level:
        raise ValueError("prefix level must be in [0, path.level]")
    return MortonPath(level, path.code >> (3 * (path.level - level)))


def prefix_codes(codes: np.ndarray, levels: np.ndarray, at_level) -> np.ndarray:
    """Vectorized prefix: codes of the enclosing cells at ``at_level``."""
    codes = np.asarray(codes, dtype=np.uint64)
    shift = (3 * (np.asarray(levels, dtype=np.int64) - at_level)).astype(np.uint64)
    return codes >> shift


def traversal_keys(codes: np.ndarray, levels: np.ndarray, direction) -> np.ndarray:
    """Direction-dependent Morton sort keys for front-to-back traversal.

    For each axis whose ray-direction component is negative, the axis bits of
    every 3-bit group are flipped; the flipped code is then left-aligned to
    MAX_LEVEL granularity. For a leaf-only (non-overlapping) voxel set,
    ascending key order equals ray entry-distance order for every ray whose
    direction matches the sign pattern. Zero components flip nothing.
    """
    codes = np.asarray(codes, dtype=np.uint64)
    levels = np.asarray(levels, dtype=np.int64)
    direction = np.asarray(direction, dtype=np.float64)

    flip = np.uint64(0)
    if direction[0] < 0:
        flip |= _AXIS_MASK_X
    if direction[1] < 0:
        flip |= _AXIS_MASK_Y
    if direction[2] < 0:
        flip |= _AXIS_MASK_Z

    nbits = (3 * levels).astype(np.uint64)
    mask = np.where(
        levels > 0, (np.uint64(1) << nbits) - np.uint64(1), np.uint64(0)
    )
    flipped = codes ^ (flip & mask)
    return flipped << (np.uint64(3) * np.uint64(MAX_LEVEL) - nbits)


def sort_keys(codes: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Storage-order-independent total order on a leaf-only voxel set.

    Left-aligns each code to MAX_LEVEL granularity. Two distinct cells collide
    only when one is the all-zero-child descendant of the other, which the
    leaf-only invariant rules out.
    """
    codes = np.asarray(codes, dtype=np.uint64)
    levels = np.asarray(levels, dtype=np.int64)
    nbits = (3 * levels).astype(np.uint64)
    return codes << (np.uint64(3) * np.uint64(MAX_LEVEL) - nbits)
