"""Run configuration: one flat dataclass shared by training, tracking and the CLI.

Every field maps 1:1 to a YAML key and to a --flag, so a run is fully
described by (config, seed) and can be hashed for caching/provenance.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields

import yaml

from .errors import ConfigurationError


@dataclass(frozen=True)
class Profile:
    """Spatial geometry of one model scale."""

    image_size: int
    grid: int
    channels: int
    stride: int


# Both profiles share the stride-14 encoder; only the input side changes.
PROFILES = {
    "default": Profile(image_size=252, grid=18, channels=64, stride=14),
    "small": Profile(image_size=126, grid=9, channels=64, stride=14),
}


@dataclass
class RunConfig:
    # geometry / scale
    profile: str = "default"
    seed: int = 0

    # embedding-prediction pretraining
    alpha: float = 25.0          # invariance term weight
    beta: float = 1.0            # covariance term weight
    rho_max: float = 0.2         # max fraction of feature cells corrupted
    expander_factor: int = 4     # expander width = factor * channels
    lr_predictor: float = 1e-4
    lr_projnet: float = 1e-3
    lr_expander: float = 1e-3
    jepa_steps: int = 300
    jepa_batch: int = 16
    jepa_sequences: int = 2048
    jepa_holdout: float = 0.1
    use_projnet: bool = True     # keep the linear tail after fine-tuning

    # tracking head
    sigma_cls: float = 1.0       # label gaussian width, in grid cells
    target_threshold: float = 0.05
    lr_stage0: float = 1e-3
    stage0_steps: int = 300
    stage0_batch: int = 8
    stage0_sequences: int = 256
    lr_head: float = 3e-4
    head_steps: int = 150
    head_batch: int = 8

    # occlusion / point-visibility module
    num_points: int = 16
    refine_iters: int = 4
    prior_frames: tuple = (0, 3)  # window indices that receive box-prior injection
    sigma_energy: float = 1.0
    occ_w_cls_track: float = 200.0
    occ_w_cls_point: float = 100.0
    occ_w_reg_track: float = 1.0
    occ_w_reg_point: float = 0.5
    lr_point: float = 1e-3
    point_steps: int = 400
    point_batch: int = 8
    point_sequences: int = 256
    lr_occ: float = 1e-3
    occ_steps: int = 300
    occ_batch: int = 8
    occ_sequences: int = 192

    # online tracker
    window_size: int = 8
    frame_step: int = 8
    vis_init_threshold: float = 0.85
    occlusion_trigger: float = 0.5
    conf_threshold: float = 0.5
    resample_patience: int = 3

    # evaluation
    precision_threshold: float = 20.0
    norm_precision_threshold: float = 0.2

    # artifact locations (excluded from the config hash: moving an output
    # tree must not change the identity of a run)
    data_dir: str = "runs/data"
    checkpoint_dir: str = "runs/checkpoints"
    report_dir: str = "runs/reports"

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigurationError(
                f"unknown profile {self.profile!r}, expected one of {sorted(PROFILES)}"
            )
        if isinstance(self.prior_frames, list):
            self.prior_frames = tuple(self.prior_frames)
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if not 0.0 < self.rho_max < 1.0:
            raise ConfigurationError("rho_max must lie in (0, 1)")
        if self.window_size < 2:
            raise ConfigurationError("window_size must be at least 2")
        if self.frame_step < 1:
            raise ConfigurationError("frame_step must be at least 1")
        if not 0.0 <= self.vis_init_threshold <= 1.0:
            raise ConfigurationError("vis_init_threshold must lie in [0, 1]")
        if self.num_points < 1:
            raise ConfigurationError("num_points must be positive")
        if any(not 0 <= f < self.window_size for f in self.prior_frames):
            raise ConfigurationError("prior_frames must index into the window")

    @property
    def spec(self) -> Profile:
        return PROFILES[self.profile]


def _coerce(name: str, raw, target_type):
    """Parse a string override into the field's declared type."""
    if target_type is bool:
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("1", "true", "yes"):
            return True
        if str(raw).lower() in ("0", "false", "no"):
            return False
        raise ConfigurationError(f"cannot parse {raw!r} as bool for {name}")
    if target_type is tuple:
        if isinstance(raw, (tuple, list)):
            return tuple(int(v) for v in raw)
        return tuple(int(v) for v in str(raw).split(",") if v != "")
    try:
        return target_type(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(
            f"cannot parse {raw!r} as {target_type.__name__} for {name}"
        ) from exc


def make_config(values: dict) -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    coerced = {}
    for name, raw in values.items():
        ftype = known[name].type
        if isinstance(ftype, str):
            ftype = {"int": int, "float": float, "str": str, "tuple": tuple,
                     "bool": bool}.get(ftype.strip(), str)
        coerced[name] = _coerce(name, raw, ftype)
    return RunConfig(**coerced)


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a mapping")
    return make_config(data)


def save_config(cfg: RunConfig, path: str) -> None:
    data = dataclasses.asdict(cfg)
    data["prior_frames"] = list(cfg.prior_frames)
    with open(path, "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=True)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    base = dataclasses.asdict(cfg)
    base.update(overrides)
    return make_config(base)


PATH_FIELDS = ("data_dir", "checkpoint_dir", "report_dir")


def config_hash(cfg: RunConfig) -> str:
    """Stable 12-hex digest of the run-defining configuration."""
    data = dataclasses.asdict(cfg)
    data["prior_frames"] = list(cfg.prior_frames)
    for key in PATH_FIELDS:
        data.pop(key, None)
    blob = json.dumps(data, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
