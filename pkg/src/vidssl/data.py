"""Synthetic moving-sprite video data.

Clips are dense (T, H, W, C) float tensors in [0, 1]. A clip is rendered
deterministically from a :class:`SpriteSceneSpec`; the class label is the
canonical direction nearest to the sprite's velocity. Rendering uses smooth
sub-pixel coverage so small motions move the image centroid every frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .config import DataConfig, AugmentConfig
from .seeding import derive_rng

SHAPES = ("square", "disc", "cross", "diamond")


@dataclass(frozen=True)
class SpriteSceneSpec:
    """Everything needed to re-render one clip."""

    shape: str
    start_row: float
    start_col: float
    vel_row: float          # pixels per frame
    vel_col: float
    size: float             # half-extent in pixels
    intensity: tuple[float, float, float]
    background: float
    label: int | None = None
    seed: int = 0


def direction_class(vel_row: float, vel_col: float, num_classes: int) -> int:
    """Nearest canonical direction (0 = +col, counter-clockwise)."""
    angle = math.atan2(-vel_row, vel_col)  # row axis points down
    step = 2.0 * math.pi / num_classes
    return int(round(angle / step)) % num_classes


def _reflect(pos: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Fold positions into [lo, hi] by mirror reflection."""
    if hi <= lo:
        return np.full_like(pos, (lo + hi) / 2.0)
    period = 2.0 * (hi - lo)
    y = np.mod(pos - lo, period)
    return lo + np.minimum(y, period - y)


def _coverage(shape: str, dr: np.ndarray, dc: np.ndarray, size: float) -> np.ndarray:
    """Smooth occupancy in [0, 1] of a sprite at offset (dr, dc) from center."""
    soft = lambda x: np.clip(x, 0.0, 1.0)
    if shape == "disc":
        return soft(size + 0.5 - np.sqrt(dr * dr + dc * dc))
    if shape == "square":
        return soft(size + 0.5 - np.maximum(np.abs(dr), np.abs(dc)))
    if shape == "diamond":
        return soft(size + 0.5 - (np.abs(dr) + np.abs(dc)))
    if shape == "cross":
        thick = max(size / 3.0, 0.6)
        horiz = soft(size + 0.5 - np.abs(dc)) * soft(thick + 0.5 - np.abs(dr))
        vert = soft(size + 0.5 - np.abs(dr)) * soft(thick + 0.5 - np.abs(dc))
        return np.maximum(horiz, vert)
    raise ValueError(f"unknown sprite shape {shape!r}")


def synth_clip(spec: SpriteSceneSpec, frames: int, height: int, width: int,
               channels: int = 3) -> torch.Tensor:
    """Render (frames, height, width, channels) in [0, 1], float32.

    The sprite center follows start + velocity * t, reflected off the walls
    so it always stays inside the canvas.
    """
    if frames <= 0 or height <= 0 or width <= 0 or channels <= 0:
        raise ValueError("clip dimensions must be positive")
    t = np.arange(frames, dtype=np.float64)
    margin = min(spec.size, (min(height, width) - 1) / 2.0)
    rows = _reflect(spec.start_row + spec.vel_row * t, margin, height - 1 - margin)
    cols = _reflect(spec.start_col + spec.vel_col * t, margin, width - 1 - margin)

    rr = np.arange(height, dtype=np.float64)[None, :, None]
    cc = np.arange(width, dtype=np.float64)[None, None, :]
    dr = rr - rows[:, None, None]
    dc = cc - cols[:, None, None]
    cov = _coverage(spec.shape, dr, dc, spec.size)  # (T, H, W)

    intensity = np.asarray(spec.intensity[:channels], dtype=np.float64)
    frames_arr = spec.background + cov[..., None] * (intensity - spec.background)
    return torch.from_numpy(np.clip(frames_arr, 0.0, 1.0)).to(torch.float32)


def sprite_centroids(clip: torch.Tensor) -> np.ndarray:
    """(T, 2) intensity-weighted (row, col) centroids of |frame - border value|.

    Brute-force measurement used as an oracle for motion checks; independent
    of the renderer's position bookkeeping.
    """
    arr = clip.numpy().mean(axis=3).astype(np.float64)  # (T, H, W)
    background = arr[:, 0:1, 0:1]  # sprite never touches the corner pixel
    mass = np.abs(arr - background)
    total = mass.sum(axis=(1, 2))
    rows = np.arange(arr.shape[1], dtype=np.float64)
    cols = np.arange(arr.shape[2], dtype=np.float64)
    r = (mass.sum(axis=2) * rows).sum(axis=1) / total
    c = (mass.sum(axis=1) * cols).sum(axis=1) / total
    return np.stack([r, c], axis=1)


def sample_subclip(source: torch.Tensor, length: int, start: int) -> torch.Tensor:
    """Contiguous frame slice [start, start + length)."""
    total = source.shape[0]
    if start < 0 or start + length > total:
        raise ValueError(f"subclip [{start}, {start + length}) out of range for T={total}")
    return source[start:start + length]


def num_subclip_starts(total: int, length: int) -> int:
    """Count of valid dense subclip offsets."""
    return max(total - length + 1, 0)


@dataclass(frozen=True)
class AugmentParams:
    """One spatial/color draw, applied identically to every frame of a clip."""

    crop_top: int = 0
    crop_left: int = 0
    crop_height: int | None = None
    crop_width: int | None = None
    flip: bool = False
    jitter: tuple[float, float, float] = (0.0, 0.0, 0.0)
    decolorize: bool = False


def sample_augment_params(rng: np.random.Generator, source_hw: tuple[int, int],
                          target_hw: tuple[int, int], aug: AugmentConfig) -> AugmentParams:
    sh, sw = source_hw
    th, tw = target_hw
    if aug.crop:
        top = int(rng.integers(0, sh - th + 1))
        left = int(rng.integers(0, sw - tw + 1))
    else:
        if (sh, sw) != (th, tw):
            raise ValueError("crop disabled but source and target sizes differ")
        top = left = 0
    flip = bool(rng.random() < aug.flip_prob)
    jitter = tuple(float(x) for x in rng.uniform(-aug.jitter, aug.jitter, size=3))
    decolorize = bool(rng.random() < aug.decolor_prob)
    return AugmentParams(top, left, th, tw, flip, jitter, decolorize)


def augment(clip: torch.Tensor, params: AugmentParams) -> torch.Tensor:
    """Crop, flip, per-channel jitter (clamped to [0, 1]), decolorize."""
    t, h, w, c = clip.shape
    ch = params.crop_height if params.crop_height is not None else h
    cw = params.crop_width if params.crop_width is not None else w
    if params.crop_top < 0 or params.crop_top + ch > h or params.crop_left < 0 \
            or params.crop_left + cw > w:
        raise ValueError("crop window outside clip bounds")
    out = clip[:, params.crop_top:params.crop_top + ch,
               params.crop_left:params.crop_left + cw, :]
    if params.flip:
        out = torch.flip(out, dims=[2])
    jitter = torch.tensor(params.jitter[:c], dtype=out.dtype)
    if bool(torch.any(jitter != 0)):
        out = torch.clamp(out + jitter, 0.0, 1.0)
    else:
        out = out.clone()
    if params.decolorize:
        out = out.mean(dim=3, keepdim=True).expand(-1, -1, -1, c).contiguous()
    return out


def augment_batch(clips: torch.Tensor, rng: np.random.Generator, data_cfg: DataConfig,
                  aug_cfg: AugmentConfig) -> torch.Tensor:
    """One independently augmented training view per source video.

    Per clip: a random temporal subclip of ``clip_frames`` frames, then one
    spatial/color draw applied to all of its frames. Draw order is fixed, so
    a given (rng stream, batch) pair always produces the same views.
    """
    views = []
    t_src = clips.shape[1]
    span = t_src - data_cfg.clip_frames
    for i in range(clips.shape[0]):
        start = int(rng.integers(0, span + 1)) if span > 0 else 0
        sub = sample_subclip(clips[i], data_cfg.clip_frames, start)
        params = sample_augment_params(rng, sub.shape[1:3],
                                       (data_cfg.height, data_cfg.width), aug_cfg)
        views.append(augment(sub, params))
    return torch.stack(views)


def occlude(clip: torch.Tensor, frame_ids, region: tuple[int, int, int, int],
            fill: float = 0.5) -> torch.Tensor:
    """Copy of ``clip`` with ``region`` = (top, left, height, width) set to
    ``fill`` on the listed frames; every other pixel is untouched."""
    t, h, w, _ = clip.shape
    top, left, rh, rw = region
    if top < 0 or left < 0 or rh < 0 or rw < 0 or top + rh > h or left + rw > w:
        raise ValueError(f"occlusion region {region} outside {h}x{w} frame")
    frame_ids = list(frame_ids)
    if any(f < 0 or f >= t for f in frame_ids):
        raise ValueError("occluded frame index out of range")
    out = clip.clone()
    for f in frame_ids:
        out[f, top:top + rh, left:left + rw, :] = fill
    return out


# ---------------------------------------------------------------------------
# Dataset builder and manifest
# ---------------------------------------------------------------------------

@dataclass
class ClipRecord:
    clip_id: int
    split: str               # train | test
    label: int
    spec: SpriteSceneSpec


def _safe_start(rng: np.random.Generator, vel: float, frames: int, extent: int,
                margin: float) -> float:
    """Start coordinate such that no wall reflection happens within the clip."""
    travel = vel * (frames - 1)
    lo = margin + max(0.0, -travel)
    hi = (extent - 1 - margin) - max(0.0, travel)
    if hi < lo:  # too fast to avoid walls; fall back to center start
        return (extent - 1) / 2.0
    return float(rng.uniform(lo, hi))


def make_record(index: int, split: str, cfg: DataConfig) -> ClipRecord:
    """Deterministic record for clip ``index`` of ``split``.

    Labels cycle round-robin through the direction classes so every class
    count is balanced within +-1.
    """
    rng = derive_rng(cfg.seed, "clip", split, index)
    label = index % cfg.num_classes
    base_angle = 2.0 * math.pi * label / cfg.num_classes
    angle = base_angle + math.radians(float(rng.uniform(-cfg.angle_jitter_deg,
                                                        cfg.angle_jitter_deg)))
    speed = float(rng.uniform(cfg.speed_min, cfg.speed_max))
    vel_col = speed * math.cos(angle)
    vel_row = -speed * math.sin(angle)
    size = float(rng.uniform(cfg.sprite_size_min, cfg.sprite_size_max))
    shape = cfg.shapes[int(rng.integers(0, len(cfg.shapes)))]
    intensity = tuple(float(x) for x in rng.uniform(cfg.intensity_min,
                                                    cfg.intensity_max, size=3))
    background = float(rng.uniform(cfg.background_min, cfg.background_max))
    start_row = _safe_start(rng, vel_row, cfg.video_frames, cfg.video_height, size + 1)
    start_col = _safe_start(rng, vel_col, cfg.video_frames, cfg.video_width, size + 1)
    spec = SpriteSceneSpec(shape=shape, start_row=start_row, start_col=start_col,
                           vel_row=vel_row, vel_col=vel_col, size=size,
                           intensity=intensity, background=background,
                           label=label, seed=int(rng.integers(0, 2**31)))
    return ClipRecord(clip_id=index, split=split, label=label, spec=spec)


def build_dataset(cfg: DataConfig) -> list[ClipRecord]:
    records = [make_record(i, "train", cfg) for i in range(cfg.train_clips)]
    records += [make_record(i, "test", cfg) for i in range(cfg.test_clips)]
    return records


def render_record(record: ClipRecord, cfg: DataConfig) -> torch.Tensor:
    return synth_clip(record.spec, cfg.video_frames, cfg.video_height,
                      cfg.video_width, cfg.channels)


def render_split(records: list[ClipRecord], cfg: DataConfig,
                 split: str) -> tuple[torch.Tensor, torch.Tensor]:
    """(clips, labels) stacked for one split; clips are the full source videos."""
    rows = [r for r in records if r.split == split]
    clips = torch.stack([render_record(r, cfg) for r in rows])
    labels = torch.tensor([r.label for r in rows], dtype=torch.long)
    return clips, labels


def write_manifest(records: list[ClipRecord], path: str | Path) -> None:
    lines = []
    for r in records:
        row = {"clip_id": r.clip_id, "split": r.split, "label": r.label,
               "spec": asdict(r.spec)}
        lines.append(json.dumps(row, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> list[ClipRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        spec_data = row["spec"]
        spec_data["intensity"] = tuple(spec_data["intensity"])
        spec = SpriteSceneSpec(**spec_data)
        records.append(ClipRecord(clip_id=row["clip_id"], split=row["split"],
                                  label=row["label"], spec=spec))
    return records


def export_frames(record: ClipRecord, cfg: DataConfig, out_dir: str | Path) -> list[Path]:
    """Lossless per-frame PNG dump of one clip (optional raw export)."""
    from PIL import Image

    clip = render_record(record, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    arr = (clip.numpy() * 255.0).round().astype(np.uint8)
    for i in range(arr.shape[0]):
        p = out / f"clip{record.clip_id:05d}_{record.split}_f{i:03d}.png"
        Image.fromarray(arr[i]).save(p)
        paths.append(p)
    return paths
