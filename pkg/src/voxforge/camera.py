"""Pinhole cameras, unprojection, pixel footprints, and similarity alignment.

World/camera conventions:

* ``R`` is world-to-camera, ``t`` the translation: ``x_cam = R @ x_world + t``.
* The camera looks down +z in camera space; points with ``z_cam <= 0`` are
  behind the camera.
* Pixel coordinates are continuous with integer values at pixel centers, so
  raster entry ``[v, u]`` samples the point ``(u, v)``.

Camera text files hold one camera per line:
``id fx fy cx cy w h R00 R01 R02 R10 .. R22 t0 t1 t2`` (row-major R),
whitespace separated, ``#`` starts a comment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the raster")
        if np.max(np.abs(R @ R.T - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("R is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("R must have determinant +1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -self.R.T @ self.t

    def ray_directions(self, u, v) -> np.ndarray:
        """Unit world-space directions of the rays through pixels (u, v)."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        d_cam = np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)],
            axis=-1,
        )
        d = d_cam @ self.R  # == (R^T @ d_cam^T)^T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


def unproject_pixel(cam: Camera, u, v, depth) -> np.ndarray:
    """World point at z-depth ``depth`` along the ray of pixel ``(u, v)``.

    Computes ``R^T (depth * K^{-1} [u, v, 1]^T - t)``. Accepts scalars or
    broadcastable arrays; the last output axis is xyz.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0) or not np.all(np.isfinite(depth)):
        raise ValueError("invalid depth")
    x_cam = np.stack(
        [
            depth * (u - cam.cx) / cam.fx,
            depth * (v - cam.cy) / cam.fy,
            depth * np.ones_like(u),
        ],
        axis=-1,
    )
    return (x_cam - cam.t) @ cam.R  # == R^T (x_cam - t), row-vector form


def project_point(cam: Camera, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixel coordinates and z-depth of world points ``x``.

    Raises if any point is at or behind the camera plane; pixel coordinates
    may fall outside the raster (callers check bounds).
    """
    u, v, z = project_points(cam, x)
    if np.any(z <= 0):
        raise ValueError("behind camera")
    return u, v, z


def project_points(cam: Camera, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Like :func:`project_point` but never raises: z <= 0 marks invalid."""
    x = np.asarray(x, dtype=np.float64)
    x_cam = x @ cam.R.T + cam.t
    z = x_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * x_cam[..., 0] / z + cam.cx
        v = cam.fy * x_cam[..., 1] / z + cam.cy
    return u, v, z


def pixel_footprint_area(cam: Camera, prior, u: int, v: int) -> float:
    """Approximate world-space area covered by pixel ``(u, v)``.

    Unprojects the pixel center and its four half-pixel offsets, all at the
    center depth of the prior, and returns
    ``|(x_{u+.5} - x_{u-.5}) x (x_{v+.5} - x_{v-.5})|``.
    Depth is sampled only at the center so the estimate stays finite across
    depth discontinuities. Returns NaN when the center depth is invalid,
    signalling the caller to skip the pixel.
    """
    depth = float(prior.depth[v, u])
    if not math.isfinite(depth) or depth <= 0:
        return math.nan
    du = unproject_pixel(cam, u + 0.5, v, depth) - unproject_pixel(
        cam, u - 0.5, v, depth
    )
    dv = unproject_pixel(cam, u, v + 0.5, depth) - unproject_pixel(
        cam, u, v - 0.5, depth
    )
    return float(np.linalg.norm(np.cross(du, dv)))


def footprint_areas(cam: Camera, depth: np.ndarray) -> np.ndarray:
    """Vectorized footprint for a whole depth raster (NaN where invalid).

    With center-depth sampling the half-offset differences reduce to
    ``depth / fx`` and ``depth / fy`` rotated into the world, whose cross
    product has norm ``depth^2 / (fx * fy)`` exactly.
    """
    depth = np.asarray(depth, dtype=np.float64)
    area = depth * depth / (cam.fx * cam.fy)
    return np.where(np.isfinite(depth) & (depth > 0), area, np.nan)


@dataclass(frozen=True)
class SimilarityTransform:
    """Map ``y = s * R @ x + t`` with positive scale and proper rotation."""

    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if self.s <= 0:
            raise ValueError("scale must be positive")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6 or np.linalg.det(R) < 0:
            raise ValueError("R must be a proper rotation")

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.s * (x @ self.R.T) + self.t

    def inverse(self) -> "SimilarityTransform":
        Rin = self.R.T
        return SimilarityTransform(1.0 / self.s, Rin, -(Rin @ self.t) / self.s)


def umeyama_align(src, dst) -> SimilarityTransform:
    """Least-squares similarity aligning ``src`` points onto ``dst`` points.

    Minimizes ``sum |dst_i - (s R src_i + t)|^2`` (Umeyama's closed form via
    SVD of the cross-covariance, with the determinant-corrected sign matrix).
    Requires at least three non-collinear pairs.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape or len(src) < 3:
        raise ValueError("degenerate configuration")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    ds = src - mu_s
    dd = dst - mu_d
    var_s = (ds * ds).sum() / len(src)

    cov = dd.T @ ds / len(src)
    U, d, Vt = np.linalg.svd(cov)

    scale_ref = np.sqrt(var_s) * np.sqrt((dd * dd).sum() / len(src))
    if var_s <= 0 or d[1] <= 1e-12 * max(d[0], scale_ref):
        raise ValueError("degenerate configuration")

    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0

    R = U @ S @ Vt
    s = float((d * np.diag(S)).sum() / var_s)
    if s <= 0:
        raise ValueError("degenerate configuration")
    t = mu_d - s * (R @ mu_s)
    return SimilarityTransform(s, R, t)


def alignment_residual(transform: SimilarityTransform, src, dst) -> float:
    """Sum of squared distances ``|dst - transform(src)|^2``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    diff = dst - transform.apply(src)
    return float((diff * diff).sum())


def apply_similarity_to_camera(cam: Camera, transform: SimilarityTransform) -> Camera:
    """Re-express a camera so it views the transformed world frame.

    If ``transform`` maps the camera's original world frame into the target
    frame, the returned camera projects target-frame points to the same
    pixels, and its z-depths are metric in the target frame (scaled by s).
    Depth rasters captured by ``cam`` must be multiplied by ``transform.s``
    to stay consistent.
    """
    # x_cam_new = s * (R @ T^{-1}(x) + t) keeps pixels fixed and gives
    # z-depths metric in the target frame; the new center is T(old center).
    R_new = cam.R @ transform.R.T
    t_new = transform.s * cam.t - R_new @ transform.t
    return Camera(
        fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
        R=R_new, t=t_new, width=cam.width, height=cam.height,
    )


def save_cameras(path, cams: list[Camera]) -> None:
    lines = ["# id fx fy cx cy w h R00..R22 t0 t1 t2"]
    for i, c in enumerate(cams):
        vals = [c.fx, c.fy, c.cx, c.cy]
        nums = " ".join(format(v, ".17g") for v in vals)
        rot = " ".join(format(v, ".17g") for v in c.R.reshape(-1))
        trn = " ".join(format(v, ".17g") for v in c.t)
        lines.append(f"{i} {nums} {c.width} {c.height} {rot} {trn}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_cameras(path) -> list[Camera]:
    records = {}
    with open(path) as f:
        for ln, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 19:
                raise DataFormatError(
                    f"{path}:{ln}: expected 19 fields, got {len(parts)}"
                )
            try:
                cam_id = int(parts[0])
                fx, fy, cx, cy = map(float, parts[1:5])
                w, h = int(parts[5]), int(parts[6])
                R = np.array(list(map(float, parts[7:16]))).reshape(3, 3)
                t = np.array(list(map(float, parts[16:19])))
            except ValueError as e:
                raise DataFormatError(f"{path}:{ln}: {e}") from e
            if cam_id in records:
                raise DataFormatError(f"{path}:{ln}: duplicate camera id {cam_id}")
            records[cam_id] = Camera(fx, fy, cx, cy, R, t, w, h)
    return [records[k] for k in sorted(records)]
