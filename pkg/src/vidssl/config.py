"""Experiment configuration: dataclasses, defaults, YAML round-trip, run ids.

Every tunable default lives here so a dumped config file is the single
source of truth for a run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

OUT_ROOT_ENV = "VIDSSL_OUT_ROOT"


@dataclass
class DataConfig:
    """Synthetic moving-sprite dataset."""

    num_classes: int = 4
    train_clips: int = 1024
    test_clips: int = 256
    # Source video geometry. Training samples are subclips of ``clip_frames``
    # frames cropped to ``height`` x ``width``; with video_frames == clip_frames
    # and video_size == (height, width) the sampling is the identity.
    video_frames: int = 16
    video_height: int = 32
    video_width: int = 32
    clip_frames: int = 16
    height: int = 32
    width: int = 32
    channels: int = 3
    shapes: list[str] = field(default_factory=lambda: ["square", "disc", "cross", "diamond"])
    speed_min: float = 0.8
    speed_max: float = 1.4
    angle_jitter_deg: float = 20.0
    sprite_size_min: float = 2.5
    sprite_size_max: float = 4.0
    intensity_min: float = 0.55
    intensity_max: float = 1.0
    background_min: float = 0.0
    background_max: float = 0.25
    seed: int = 0


@dataclass
class AugmentConfig:
    """Per-clip augmentation draws (one draw applied to every frame)."""

    crop: bool = True
    flip_prob: float = 0.5
    jitter: float = 0.1        # uniform per-channel shift in [-jitter, jitter]
    decolor_prob: float = 0.2


@dataclass
class TrainConfig:
    """Pretraining hyperparameters."""

    temperature: float = 0.07
    momentum: float = 0.999           # key-encoder moving-average coefficient
    queue_capacity: int = 4096
    # Decay base for queue weights; None means "oldest key contributes half",
    # i.e. 0.5 ** (1 / queue_capacity). 1.0 disables decay.
    decay: float | None = None
    drop_count: int = 4
    mask_mode: str = "adversarial"    # adversarial | random | none
    lr_encoder: float = 0.02
    lr_generator: float = 0.002
    sgd_momentum: float = 0.9
    batch_size: int = 64
    warmup_epochs: int = 10
    adversarial_epochs: int = 10
    embed_dim: int = 64
    encoder_channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    generator_channels: list[int] = field(default_factory=lambda: [8, 16])
    generator_hidden: int = 64
    dtype: str = "float32"            # float32 | float64
    threads: int = 1                  # 0 = leave torch defaults (non-deterministic order)
    checkpoint_every: int = 1         # epochs
    seed: int = 0

    def resolved_decay(self) -> float:
        if self.decay is None:
            return 0.5 ** (1.0 / self.queue_capacity)
        return float(self.decay)

    def validate(self) -> None:
        # m == 1 freezes the key encoder; allowed so the fixed point is testable
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must be in [0, 1], got {self.momentum}")
        t = self.resolved_decay()
        if not 0.0 < t <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {t}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.mask_mode not in ("adversarial", "random", "none"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.queue_capacity <= 0:
            raise ValueError("queue_capacity must be positive")


@dataclass
class OcclusionConfig:
    """Which frames get a filled box, for the robustness diagnostic."""

    frame_fraction: float = 0.5       # central fraction of frames occluded
    region_fraction: float = 0.5      # central box side, as fraction of H/W
    fill: float = 0.5


@dataclass
class EvalConfig:
    probe_epochs: int = 40
    probe_lr: float = 0.05
    probe_batch: int = 32
    finetune_epochs: int = 10
    finetune_lr: float = 0.05
    finetune_batch: int = 32
    clips_per_video: int = 10
    finetune_enabled: bool = False    # ablation also reports full finetune when set
    occlusion: OcclusionConfig = field(default_factory=OcclusionConfig)
    seed: int = 0


@dataclass
class AblationConfig:
    """Grid for the sweep. ``cells`` wins over the cross product when given."""

    mask_modes: list[str] = field(default_factory=lambda: ["none", "random", "adversarial"])
    drop_counts: list[int] = field(default_factory=lambda: [2, 4, 6, 8, 12])
    # weak-to-strong decay plus the halving operating point (None) and "off"
    decays: list[float | None] = field(default_factory=lambda: [1.0, 0.999, 0.9999,
                                                                None, 0.99999])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    cells: list[dict] | None = None

    def grid(self) -> list[dict]:
        """Resolved (mode, k, t, seed) cells."""
        if self.cells is not None:
            out = []
            for cell in self.cells:
                if "seed" in cell:
                    out.append(dict(cell))
                    continue
                for seed in self.seeds:
                    row = dict(cell)
                    row["seed"] = seed
                    out.append(row)
            return out
        out = []
        for mode in self.mask_modes:
            for k in self.drop_counts:
                for t in self.decays:
                    for seed in self.seeds:
                        out.append({"mask_mode": mode, "drop_count": k, "decay": t, "seed": seed})
        return out


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    out_dir: str = "runs/default"

    def resolved_out_dir(self) -> Path:
        root = os.environ.get(OUT_ROOT_ENV)
        path = Path(self.out_dir)
        if root and not path.is_absolute():
            return Path(root) / path
        return path


def _asdict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _from_dict(cls, data: dict):
    """Build a (possibly nested) dataclass from a plain dict, strictly."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        nested = _NESTED.get((cls, name))
        if nested is not None and isinstance(value, dict):
            kwargs[name] = _from_dict(nested, value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    (ExperimentConfig, "data"): DataConfig,
    (ExperimentConfig, "augment"): AugmentConfig,
    (ExperimentConfig, "train"): TrainConfig,
    (ExperimentConfig, "eval"): EvalConfig,
    (ExperimentConfig, "ablation"): AblationConfig,
    (EvalConfig, "occlusion"): OcclusionConfig,
}


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(_asdict(cfg), sort_keys=True, default_flow_style=False)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))


def load_config(path: str | Path) -> ExperimentConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    return config_from_dict(data)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data)


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """New config with dotted-path overrides, e.g. {"train.seed": 3}."""
    data = _asdict(cfg)
    for key, value in overrides.items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node[part]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return config_from_dict(data)


def run_id(cfg) -> str:
    """Stable short id for a resolved config (dataclass or dict)."""
    data = _asdict(cfg) if dataclasses.is_dataclass(cfg) else cfg
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]
