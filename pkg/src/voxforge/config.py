"""Plain-text ``key=value`` configuration.

One assignment per line, ``#`` starts a comment. Recognized keys (all
optional; anything else is an error to catch typos):

  tsdf.trunc              truncation distance (default: 3x finest voxel)
  opacity.kind            sigmoid | bell
  opacity.a               calibration offset
  opacity.p               sigmoid opacity at F = -a
  opacity.b               bell opacity at F = -a
  opacity.alpha_min       rescale range low
  opacity.alpha_max       rescale range high
  opacity.tau_prune       pruning threshold on mapped opacity
  augment.level           uniform completion level (default: median level)
  init.merge_threshold    color-deviation merge threshold
  init.level_max          deepest unprojection level
  train.iters             training iterations
  train.prune_interval    prune/subdivide interval
  train.refresh_R         refined-target refresh interval
  train.lr.density        density learning rate
  train.lr.sh0            degree-0 SH learning rate
  train.lr.shrest         higher SH learning rate
  train.tau_prune         contribution pruning threshold
  train.max_subdiv_frac   fraction of voxels split per interval
  train.level_max         deepest level subdivision may create
  loss.lambda_photo       photometric weight
  loss.lambda_reg         regularizer weight
  loss.lambda_refd        refined-depth weight
  refine.K                neighbor views
  refine.n_rand           random candidates per pixel
  refine.s                perturbation scale
  refine.reproj_thresh    geometric check threshold (pixels)
  mesh.resolution         marching-cubes grid resolution
"""

from __future__ import annotations

from .errors import DataFormatError
from .optimize import TrainConfig
from .tsdf_opacity import OpacityMapping

_KNOWN_KEYS = {
    "tsdf.trunc": float,
    "opacity.kind": str,
    "opacity.a": float,
    "opacity.p": float,
    "opacity.b": float,
    "opacity.alpha_min": float,
    "opacity.alpha_max": float,
    "opacity.tau_prune": float,
    "augment.level": int,
    "init.merge_threshold": float,
    "init.level_max": int,
    "train.iters": int,
    "train.prune_interval": int,
    "train.refresh_R": int,
    "train.lr.density": float,
    "train.lr.sh0": float,
    "train.lr.shrest": float,
    "train.tau_prune": float,
    "train.max_subdiv_frac": float,
    "train.level_max": int,
    "loss.lambda_photo": float,
    "loss.lambda_reg": float,
    "loss.lambda_refd": float,
    "refine.K": int,
    "refine.n_rand": int,
    "refine.s": float,
    "refine.reproj_thresh": float,
    "mesh.resolution": int,
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values: dict = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"{source}:{ln}: expected key=value")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _KNOWN_KEYS:
            raise DataFormatError(f"{source}:{ln}: unknown config key {key!r}")
        try:
            values[key] = _KNOWN_KEYS[key](val)
        except ValueError as e:
            raise DataFormatError(f"{source}:{ln}: bad value for {key}: {e}") from e
    return values


def load_config(path) -> dict:
    with open(path) as f:
        return parse_config_text(f.read(), source=str(path))


def train_config_from(values: dict, seed: int = 0) -> TrainConfig:
    return TrainConfig(
        iters=values.get("train.iters", 500),
        prune_interval=values.get("train.prune_interval", 200),
        refresh_r=values.get("train.refresh_R", 100),
        lr_density=values.get("train.lr.density", 5e-2),
        lr_sh0=values.get("train.lr.sh0", 1e-2),
        lr_sh_rest=values.get("train.lr.shrest", 2.5e-4),
        lambda_photo=values.get("loss.lambda_photo", 0.1),
        lambda_reg=values.get("loss.lambda_reg", 1.0),
        lambda_refd=values.get("loss.lambda_refd", 0.05),
        tau_prune=values.get("train.tau_prune", 1e-4),
        max_subdiv_frac=values.get("train.max_subdiv_frac", 0.05),
        level_max=values.get("train.level_max", 12),
        refine_k=values.get("refine.K", 4),
        refine_n_rand=values.get("refine.n_rand", 16),
        refine_s=values.get("refine.s", 0.04),
        refine_reproj_thresh=values.get("refine.reproj_thresh", 1.0),
        seed=seed,
    )


def opacity_mapping_from(values: dict) -> OpacityMapping:
    return OpacityMapping(
        kind=values.get("opacity.kind", "sigmoid"),
        a=values.get("opacity.a", 0.1),
        p=values.get("opacity.p", 0.9),
        b=values.get("opacity.b", 0.5),
    )
