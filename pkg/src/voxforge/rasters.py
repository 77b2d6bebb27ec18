"""Raster containers and sampling.

Two tiny binary formats, both little-endian:

* ``IMGF`` float raster: magic ``IMGF``, header ``width height channels``
  (uint32 each), then float32 data in row-major (v, u, c) order. Used for
  images, depth maps, normal maps, and confidence maps.
* ``MSKB`` byte mask: magic ``MSKB``, header ``width height`` (uint32), then
  uint8 data row-major. Companion masks for sparse depth maps.

Round trips are bit-exact. A P6 PPM exporter is provided for quick viewing.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataFormatError

_IMGF_MAGIC = b"IMGF"
_MSKB_MAGIC = b"MSKB"


def save_float_raster(path, data: np.ndarray) -> None:
    """Write an (H, W) or (H, W, C) float array as an IMGF file."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise ValueError("raster must be HxW or HxWxC")
    h, w, c = data.shape
    with open(path, "wb") as f:
        f.write(_IMGF_MAGIC)
        f.write(struct.pack("<III", w, h, c))
        f.write(data.astype("<f4").tobytes(order="C"))


def load_float_raster(path) -> np.ndarray:
    """Read an IMGF file; returns (H, W) for 1 channel, else (H, W, C)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != _IMGF_MAGIC:
        raise DataFormatError(f"{path}: not an IMGF raster")
    w, h, c = struct.unpack("<III", blob[4:16])
    expect = 16 + 4 * w * h * c
    if len(blob) != expect:
        raise DataFormatError(
            f"{path}: truncated raster ({len(blob)} bytes, expected {expect})"
        )
    data = np.frombuffer(blob[16:], dtype="<f4").reshape(h, w, c)
    return data[:, :, 0].copy() if c == 1 else data.copy()


def save_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be HxW")
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(_MSKB_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(mask.astype(np.uint8).tobytes(order="C"))


def load_mask(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != _MSKB_MAGIC:
        raise DataFormatError(f"{path}: not a MSKB mask")
    w, h = struct.unpack("<II", blob[4:12])
    if len(blob) != 12 + w * h:
        raise DataFormatError(f"{path}: truncated mask")
    return np.frombuffer(blob[12:], dtype=np.uint8).reshape(h, w).copy()


def save_ppm(path, image: np.ndarray) -> None:
    """Export an (H, W, 3) float image in [0, 1] as binary P6 PPM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM export needs an HxWx3 image")
    bytes8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = bytes8.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(bytes8.tobytes(order="C"))


def sample_bilinear(raster: np.ndarray, u, v):
    """Bilinearly sample a raster at continuous pixel coordinates.

    Integer coordinates sit on pixel centers; positions are valid inside
    ``[0, W-1] x [0, H-1]``. Returns ``(values, valid)`` where invalid
    positions (out of range, or touching a non-finite sample) give 0.
    Rasters may be (H, W) or (H, W, C).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    h, w = raster.shape[:2]

    inb = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)

    u0 = np.clip(np.floor(uc).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(uc, dtype=np.int64)
    v0 = np.clip(np.floor(vc).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(vc, dtype=np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = uc - u0
    fv = vc - v0

    p00 = raster[v0, u0]
    p01 = raster[v0, u1]
    p10 = raster[v1, u0]
    p11 = raster[v1, u1]

    if raster.ndim == 3:
        fu = fu[..., None]
        fv = fv[..., None]

    val = (
        p00 * (1 - fu) * (1 - fv)
        + p01 * fu * (1 - fv)
        + p10 * (1 - fu) * fv
        + p11 * fu * fv
    )
    finite = np.isfinite(p00) & np.isfinite(p01) & np.isfinite(p10) & np.isfinite(p11)
    if raster.ndim == 3:
        finite = finite.all(axis=-1)
    valid = inb & finite
    if raster.ndim == 3:
        val = np.where(valid[..., None], val, 0.0)
    else:
        val = np.where(valid, val, 0.0)
    return val, valid
