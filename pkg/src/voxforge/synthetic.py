"""Synthetic scenes with analytic ground truth.

Shapes (sphere, plane, axis-aligned boxes) are intersected analytically per
pixel ray, textured with a multi-octave value noise (deterministic integer
hashing, so every view samples the same 3D colors and patches correlate
across views), and observed by a ring or hemisphere camera rig. Depth priors
are the analytic depths corrupted by seeded multiplicative noise, with
confidence tied to the realized noise magnitude; an optional global
similarity misalignment of the estimated poses exercises the alignment path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import Camera, SimilarityTransform, apply_similarity_to_camera
from .priors import DepthPrior


@dataclass(frozen=True)
class SceneSpec:
    shape: str = "sphere"          # sphere | plane | boxes
    radius: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)
    plane_normal: tuple = (0.0, 0.0, 1.0)
    plane_extent: float = 1.6      # half side of the textured plane patch
    n_views: int = 16
    width: int = 48
    height: int = 48
    fov_deg: float = 50.0
    rig: str = "ring"              # ring | hemisphere | grid
    rig_radius: float = 3.2
    rig_tilt: float = 0.35         # vertical offset amplitude for ring rigs
    rig_zmin: float = 0.25         # hemisphere elevation band (z fraction)
    rig_zmax: float = 0.9
    rig_spread: float = 0.12       # grid rig: lateral offset per unit radius
    noise: float = 0.0             # relative depth noise std
    pose_perturb: float = 0.0      # global similarity misalignment magnitude
    seed: int = 0
    scene_size: float = 0.0        # 0 -> derived from the shape
    background: tuple = (0.0, 0.0, 0.0)
    texture_freq: float = 1.1


# ---------------------------------------------------------------------------
# Procedural texture: multi-octave value noise over 3D points.

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xC2B2AE3D27D4EB4F)
_M3 = np.uint64(0x165667B19E3779F9)
_MF = np.uint64(0xFF51AFD7ED558CCD)
_MG = np.uint64(0xC4CEB9FE1A85EC53)


def _hash_lattice(ix, iy, iz, seed: int) -> np.ndarray:
    """Deterministic lattice hash to floats in [0, 1)."""
    seed_mix = np.uint64((seed * 0xFF51AFD7ED558CCD) & 0xFFFFFFFFFFFFFFFF)
    h = (
        ix.astype(np.uint64) * _M1
        ^ iy.astype(np.uint64) * _M2
        ^ iz.astype(np.uint64) * _M3
        ^ seed_mix
    )
    h ^= h >> np.uint64(33)
    h *= _MF
    h ^= h >> np.uint64(33)
    h *= _MG
    h ^= h >> np.uint64(33)
    return h.astype(np.float64) / 2.0**64


def value_noise(points: np.ndarray, freq: float, seed: int) -> np.ndarray:
    """Trilinearly interpolated lattice noise in [0, 1), C0-continuous."""
    p = np.asarray(points, dtype=np.float64) * freq + 1024.0
    base = np.floor(p).astype(np.int64)
    frac = p - base
    out = np.zeros(len(p))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                v = _hash_lattice(
                    base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz, seed
                )
                w = (
                    (frac[:, 0] if dx else 1 - frac[:, 0])
                    * (frac[:, 1] if dy else 1 - frac[:, 1])
                    * (frac[:, 2] if dz else 1 - frac[:, 2])
                )
                out += w * v
    return out


def texture_color(points: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Per-point RGB in [0.08, 0.92]: three phase-shifted octave stacks.

    Octave frequencies are kept low enough that the finest wavelength spans
    several pixels at the default rig distances, so patch correlation stays
    discriminative under the fronto-parallel warp approximation.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rgb = np.zeros((len(points), 3))
    for ch in range(3):
        acc = np.zeros(len(points))
        amp_total = 0.0
        for octave, amp in ((1.0, 0.5), (2.0, 0.32), (4.0, 0.18)):
            acc += amp * value_noise(
                points, spec.texture_freq * octave, spec.seed * 7919 + ch * 131 + int(octave * 10)
            )
            amp_total += amp
        rgb[:, ch] = acc / amp_total
    return 0.08 + 0.84 * rgb


# ---------------------------------------------------------------------------
# Analytic geometry.


def _intersect_sphere(origin, m_dirs, center, radius):
    """Smallest positive depth z with |origin + z m - center| = radius."""
    oc = origin - center
    a = np.einsum("ij,ij->i", m_dirs, m_dirs)
    b = 2.0 * (m_dirs @ oc)
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    z1 = (-b - sq) / (2 * a)
    z2 = (-b + sq) / (2 * a)
    z = np.where(z1 > 1e-9, z1, z2)
    hit &= z > 1e-9
    return np.where(hit, z, np.nan)


def _intersect_plane(origin, m_dirs, point, normal, extent):
    denom = m_dirs @ normal
    z = np.where(np.abs(denom) > 1e-12, ((point - origin) @ normal) / denom, np.nan)
    hit = z > 1e-9
    x = origin[None, :] + z[:, None] * m_dirs
    inplane = x - point[None, :]
    # limit to a square patch so the scene is bounded
    tangent = inplane - np.outer(inplane @ normal, normal)
    hit &= np.max(np.abs(tangent), axis=1) <= extent
    return np.where(hit, z, np.nan)


def _boxes_for(spec: SceneSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    c = np.asarray(spec.center, dtype=np.float64)
    r = spec.radius
    return [
        (c + np.array([-r, -r, -0.6 * r]), c + np.array([0.1 * r, 0.2 * r, 0.4 * r])),
        (c + np.array([0.25 * r, -0.6 * r, -0.6 * r]), c + np.array([r, 0.6 * r, 0.1 * r])),
        (c + np.array([-0.4 * r, 0.4 * r, -0.6 * r]), c + np.array([0.5 * r, r, 0.8 * r])),
    ]


def _intersect_boxes(origin, m_dirs, boxes):
    best = np.full(len(m_dirs), np.nan)
    for bmin, bmax in boxes:
        d = np.where(np.abs(m_dirs) < 1e-300, 1e-300, m_dirs)
        t1 = (bmin - origin) / d
        t2 = (bmax - origin) / d
        tlo = np.minimum(t1, t2).max(axis=1)
        thi = np.maximum(t1, t2).min(axis=1)
        hit = (thi > np.maximum(tlo, 1e-9)) & (tlo > 1e-9)
        z = np.where(hit, tlo, np.nan)
        best = np.where(np.isnan(best) | (z < best), z, best)
    return best


def analytic_depth(spec: SceneSpec, cam: Camera) -> np.ndarray:
    """Exact z-depth raster of the shape for one camera (NaN = no hit)."""
    h, w = cam.height, cam.width
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    k = np.stack(
        [(uu.reshape(-1) - cam.cx) / cam.fx, (vv.reshape(-1) - cam.cy) / cam.fy,
         np.ones(h * w)],
        axis=1,
    )
    m = k @ cam.R  # R^T k per row: depth parameterization x = C + z * m
    origin = cam.center
    center = np.asarray(spec.center, dtype=np.float64)
    if spec.shape == "sphere":
        z = _intersect_sphere(origin, m, center, spec.radius)
    elif spec.shape == "plane":
        nrm = np.asarray(spec.plane_normal, dtype=np.float64)
        nrm = nrm / np.linalg.norm(nrm)
        z = _intersect_plane(origin, m, center, nrm, spec.plane_extent)
    elif spec.shape == "boxes":
        z = _intersect_boxes(origin, m, _boxes_for(spec))
    else:
        raise ValueError(f"unknown shape {spec.shape!r}")
    return z.reshape(h, w)


def surface_points_from_depth(cam: Camera, depth: np.ndarray) -> np.ndarray:
    """World points of all valid depth pixels."""
    h, w = depth.shape
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    valid = np.isfinite(depth) & (depth > 0)
    from .camera import unproject_pixel

    return unproject_pixel(cam, uu[valid], vv[valid], depth[valid])


def sample_surface(spec: SceneSpec, n: int, seed: int = 0) -> np.ndarray:
    """Uniform analytic samples of the ground-truth surface (for Chamfer)."""
    rng = np.random.default_rng(seed)
    c = np.asarray(spec.center, dtype=np.float64)
    if spec.shape == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return c + spec.radius * v
    if spec.shape == "plane":
        nrm = np.asarray(spec.plane_normal, dtype=np.float64)
        nrm = nrm / np.linalg.norm(nrm)
        a = np.array([1.0, 0.0, 0.0])
        if abs(nrm @ a) > 0.9:
            a = np.array([0.0, 1.0, 0.0])
        t1 = np.cross(nrm, a)
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(nrm, t1)
        ab = rng.uniform(-spec.plane_extent, spec.plane_extent, size=(n, 2))
        return c + ab[:, :1] * t1 + ab[:, 1:] * t2
    if spec.shape == "boxes":
        boxes = _boxes_for(spec)
        pts = []
        per = max(1, n // (6 * len(boxes)))
        for bmin, bmax in boxes:
            ext = bmax - bmin
            for ax in range(3):
                for side in (0.0, 1.0):
                    p = bmin + rng.uniform(0, 1, size=(per, 3)) * ext
                    p[:, ax] = bmin[ax] + side * ext[ax]
                    pts.append(p)
        return np.vstack(pts)[:n]
    raise ValueError(f"unknown shape {spec.shape!r}")


# ---------------------------------------------------------------------------
# Camera rigs.


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation/translation for a camera at ``position``
    looking toward ``target`` (+z forward, x right, y down)."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - position
    z = z / np.linalg.norm(z)
    x = np.cross(z, -up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, -1.0, 0.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=0)
    # re-orthonormalize to machine precision for strict camera validation
    u_svd, _, vt = np.linalg.svd(R)
    R = u_svd @ vt
    return R, -R @ position


def make_rig(spec: SceneSpec) -> list[Camera]:
    center = np.asarray(spec.center, dtype=np.float64)
    f = 0.5 * spec.width / math.tan(math.radians(spec.fov_deg) / 2)
    cx = (spec.width - 1) / 2.0
    cy = (spec.height - 1) / 2.0
    cams = []
    if spec.rig == "ring":
        for i in range(spec.n_views):
            ang = 2 * math.pi * i / spec.n_views
            lift = spec.rig_tilt * math.sin(3.0 * ang + 0.7)
            pos = center + np.array(
                [
                    spec.rig_radius * math.cos(ang),
                    spec.rig_radius * math.sin(ang),
                    0.9 * spec.rig_tilt * spec.rig_radius + lift,
                ]
            )
            R, t = look_at(pos, center)
            cams.append(Camera(f, f, cx, cy, R, t, spec.width, spec.height))
    elif spec.rig == "hemisphere":
        # Horizontal up reference keeps camera roll consistent across the
        # rig; with up = +z the roll would follow the azimuth and patches
        # from nearby views would be mutually rotated.
        golden = math.pi * (3.0 - math.sqrt(5.0))
        for i in range(spec.n_views):
            zfrac = spec.rig_zmin + (spec.rig_zmax - spec.rig_zmin) * (
                i + 0.5
            ) / spec.n_views
            ang = golden * i
            rho = math.sqrt(max(0.0, 1 - zfrac * zfrac))
            pos = center + spec.rig_radius * np.array(
                [rho * math.cos(ang), rho * math.sin(ang), zfrac]
            )
            R, t = look_at(pos, center, up=(0.0, 1.0, 0.0))
            cams.append(Camera(f, f, cx, cy, R, t, spec.width, spec.height))
    elif spec.rig == "grid":
        # Pure-translation rig: every camera shares one straight-down
        # orientation, positions fan out on a golden-angle disc overhead.
        # Fronto surfaces then warp between views by exact translations, and
        # snapping the offsets to integer-disparity steps (multiples of
        # distance/focal) makes those translations land on pixel centers.
        R = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
        golden = math.pi * (3.0 - math.sqrt(5.0))
        step = spec.rig_radius / f
        for i in range(spec.n_views):
            rr = spec.rig_spread * spec.rig_radius * math.sqrt((i + 0.5) / spec.n_views)
            ang = golden * i
            off = np.array([rr * math.cos(ang), rr * math.sin(ang), 0.0])
            off = np.round(off / step) * step
            pos = center + off + np.array([0.0, 0.0, spec.rig_radius])
            cams.append(
                Camera(f, f, cx, cy, R, -R @ pos, spec.width, spec.height)
            )
    else:
        raise ValueError(f"unknown rig {spec.rig!r}")
    return cams


# ---------------------------------------------------------------------------
# Scene assembly.


@dataclass
class SyntheticScene:
    spec: SceneSpec
    cameras: list[Camera]
    images: list[np.ndarray]
    gt_depths: list[np.ndarray]
    priors: list[DepthPrior]
    pose_transform: SimilarityTransform | None
    scene_center: np.ndarray
    scene_size: float


def save_scene_spec(path, spec: SceneSpec) -> None:
    """Write the spec as key=value text (round-trips via load_scene_spec)."""
    with open(path, "w") as f:
        f.write("# synthetic scene description\n")
        for name in spec.__dataclass_fields__:
            val = getattr(spec, name)
            if isinstance(val, tuple):
                val = ",".join(format(x, ".17g") for x in val)
            elif isinstance(val, float):
                val = format(val, ".17g")
            f.write(f"{name} = {val}\n")


def load_scene_spec(path) -> SceneSpec:
    from .errors import DataFormatError

    fields = SceneSpec.__dataclass_fields__
    kwargs = {}
    with open(path) as f:
        for ln, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{ln}: expected key = value")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in fields:
                raise DataFormatError(f"{path}:{ln}: unknown scene key {key!r}")
            ftype = fields[key].type
            if ftype == "tuple":
                kwargs[key] = tuple(float(x) for x in val.split(","))
            elif ftype == "int":
                kwargs[key] = int(val)
            elif ftype == "float":
                kwargs[key] = float(val)
            else:
                kwargs[key] = val
    return SceneSpec(**kwargs)


def default_scene_size(spec: SceneSpec) -> float:
    if spec.scene_size > 0:
        return spec.scene_size
    if spec.shape == "plane":
        return 2.6 * spec.plane_extent
    return 2.6 * spec.radius


def render_ground_truth(spec: SceneSpec, cam: Camera):
    """Analytic image + depth for one view."""
    depth = analytic_depth(spec, cam)
    h, w = depth.shape
    img = np.empty((h, w, 3))
    img[:] = np.asarray(spec.background, dtype=np.float64)
    valid = np.isfinite(depth)
    if np.any(valid):
        pts = surface_points_from_depth(cam, depth)
        img[valid] = texture_color(pts, spec)
    return img, depth


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Images, exact depths, and (optionally corrupted) priors for a rig.

    With ``noise == 0`` the prior depths equal the ground truth and the
    confidence is 1 everywhere. Otherwise depths are scaled by
    ``1 + noise * eta`` with per-pixel standard normal ``eta`` and the
    confidence is ``exp(-eta^2 / 2)``. With ``pose_perturb > 0`` all
    estimated cameras (and their depths) live in a misaligned gauge related
    to the true frame by one global similarity, which alignment must undo.
    """
    cams = make_rig(spec)
    rng = np.random.default_rng(spec.seed)

    gauge = None
    if spec.pose_perturb > 0:
        scale = float(np.exp(spec.pose_perturb * rng.normal()))
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        ang = spec.pose_perturb * rng.normal()
        K = np.array(
            [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
        )
        Rg = np.eye(3) + math.sin(ang) * K + (1 - math.cos(ang)) * (K @ K)
        u_svd, _, vt = np.linalg.svd(Rg)
        Rg = u_svd @ vt
        gauge = SimilarityTransform(scale, Rg, spec.pose_perturb * rng.normal(size=3))

    images, depths, priors = [], [], []
    for cam in cams:
        img, depth = render_ground_truth(spec, cam)
        images.append(img)
        depths.append(depth)
        valid = np.isfinite(depth)
        if spec.noise > 0:
            eta = rng.normal(size=depth.shape)
            pd = np.where(valid, depth * (1.0 + spec.noise * eta), np.nan)
            conf = np.where(valid, np.exp(-0.5 * eta * eta), 0.0)
        else:
            pd = depth.copy()
            conf = np.where(valid, 1.0, 0.0)
        est_cam = cam
        if gauge is not None:
            est_cam = apply_similarity_to_camera(cam, gauge)
            pd = pd * gauge.s
        priors.append(DepthPrior(pd, conf, est_cam))

    return SyntheticScene(
        spec=spec,
        cameras=cams,
        images=images,
        gt_depths=depths,
        priors=priors,
        pose_transform=gauge,
        scene_center=np.asarray(spec.center, dtype=np.float64),
        scene_size=default_scene_size(spec),
    )
