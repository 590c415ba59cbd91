"""Flat ``key = value`` pipeline configuration.

Every key has a default; unknown keys and unparsable values are rejected.
Lines starting with ``#`` are comments. Tuples are comma separated.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from metricseg.cluster import ClusterParams
from metricseg.errors import ValidationError
from metricseg.loss import LossParams
from metricseg.synth import AugmentConfig, SceneConfig


@dataclass
class PipelineConfig:
    seed: int = 0
    voxel_size: float = 0.02
    radius_factor: float = 6.0  # neighborhood radius in voxels
    # loss
    delta_inter: float = 0.1
    delta_intra: float = 0.5
    gamma_intra: float = 10.0
    p: float = 1.0
    # model
    hidden_widths: tuple = (64, 64, 64)
    embed_dim: int = 8
    separate_semantic_net: bool = False
    # training
    steps: int = 5000
    batch_size: int = 8
    base_lr: float = 1e-4
    semantic_weight: float = 1.0
    log_every: int = 100
    # clustering
    min_cluster_size: int = 24
    min_samples: int = 5
    dbscan_eps: float = 0.1
    background_ids: tuple = (0, 1)
    cluster_per_class: bool = False  # run hdbscan separately inside each predicted class
    # scenes
    room_extent: float = 2.5
    wall_height: float = 1.0
    min_objects: int = 2
    max_objects: int = 5
    point_density: float = 200.0
    contact_probability: float = 0.5
    position_noise: float = 0.003
    color_noise: float = 0.02
    clearance: float = 0.12
    # augmentation
    color_sigma: float = 0.03
    scale_min: float = 0.8
    scale_max: float = 1.2
    rotate_z: bool = True
    x_rot_sigma_deg: float = 5.0
    x_rot_max_deg: float = 10.0
    # benchmarking
    bench_runs: int = 5

    def __post_init__(self):
        self.validate()

    @property
    def radius(self):
        return self.radius_factor * self.voxel_size

    def validate(self):
        if not self.voxel_size > 0 or not self.radius_factor > 0:
            raise ValidationError("voxel_size and radius_factor must be > 0")
        if self.steps < 0 or self.batch_size < 1 or self.bench_runs < 1:
            raise ValidationError("steps >= 0, batch_size >= 1 and bench_runs >= 1 required")
        if not self.base_lr > 0 or self.semantic_weight < 0:
            raise ValidationError("base_lr must be > 0 and semantic_weight >= 0")
        if not self.hidden_widths or min(self.hidden_widths) < 1 or self.embed_dim < 1:
            raise ValidationError("layer widths must be >= 1")
        self.loss_params()
        self.cluster_params()
        self.scene_config().validate()
        if not 0 < self.scale_min <= self.scale_max:
            raise ValidationError("need 0 < scale_min <= scale_max")

    def loss_params(self):
        return LossParams(self.delta_inter, self.delta_intra, self.gamma_intra, self.p)

    def cluster_params(self):
        return ClusterParams(self.min_cluster_size, self.min_samples, self.dbscan_eps)

    def scene_config(self):
        return SceneConfig(
            room_extent=self.room_extent, wall_height=self.wall_height,
            min_objects=self.min_objects, max_objects=self.max_objects,
            point_density=self.point_density, contact_probability=self.contact_probability,
            position_noise=self.position_noise, color_noise=self.color_noise,
            clearance=self.clearance, seed=self.seed,
        )

    def augment_config(self):
        return AugmentConfig(
            self.color_sigma, self.scale_min, self.scale_max, self.rotate_z,
            self.x_rot_sigma_deg, self.x_rot_max_deg,
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())


def _coerce(name, default, raw):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ValidationError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config(text, **overrides):
    defaults = PipelineConfig()
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValidationError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, getattr(defaults, key), raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig(**values)


def load_config(path=None, **overrides):
    text = Path(path).read_text() if path is not None else ""
    return parse_config(text, **overrides)
