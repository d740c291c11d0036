"""Downstream evaluation and diagnostics.

The pretrained encoder (generator discarded) feeds a linear classification
head. Linear-probe mode freezes the encoder and trains only the head;
finetune mode updates both. Video-level predictions average the probability
vectors of uniformly spaced subclips. Prediction entropy and the occlusion
comparison quantify how confident and how temporally robust a checkpoint is.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EvalConfig, OcclusionConfig
from .data import occlude, sample_subclip
from .models import ClipEncoder
from .seeding import derive_rng, derive_torch_seed


class ProbeHead(nn.Module):
    """Linear map from embeddings to class logits."""

    def __init__(self, embed_dim: int, num_classes: int, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(derive_torch_seed(seed, "probe-head"))
            self.linear = nn.Linear(embed_dim, num_classes)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        return self.linear(embeddings)


@dataclass
class PredictionReport:
    video_id: int
    label: int | None
    predicted: int
    probabilities: list[float]
    entropy: float

    @property
    def correct(self) -> bool | None:
        return None if self.label is None else self.predicted == self.label


def entropy(probabilities) -> float:
    """Shannon entropy in nats; 0 * log 0 counts as 0."""
    p = np.asarray(probabilities, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {float(p.sum())}, expected 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@torch.no_grad()
def embed_clips(encoder: ClipEncoder, clips: torch.Tensor,
                batch_size: int = 64) -> torch.Tensor:
    dtype = next(encoder.parameters()).dtype
    outs = [encoder(clips[lo:lo + batch_size].to(dtype))
            for lo in range(0, clips.shape[0], batch_size)]
    return torch.cat(outs)


def _train_head_on_features(head: ProbeHead, features: torch.Tensor,
                            labels: torch.Tensor, cfg: EvalConfig, seed: int) -> None:
    opt = torch.optim.SGD(head.parameters(), lr=cfg.probe_lr, momentum=0.9)
    n = features.shape[0]
    for epoch in range(cfg.probe_epochs):
        order = derive_rng(seed, "probe-order", epoch).permutation(n)
        for lo in range(0, n, cfg.probe_batch):
            idx = torch.from_numpy(order[lo:lo + cfg.probe_batch].copy())
            loss = F.cross_entropy(head(features[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()


def train_linear_probe(encoder: ClipEncoder, clips: torch.Tensor,
                       labels: torch.Tensor, num_classes: int, cfg: EvalConfig,
                       seed: int = 0) -> ProbeHead:
    """Train only the head on frozen-encoder features."""
    features = embed_clips(encoder, clips)
    head = ProbeHead(encoder.embed_dim, num_classes, seed=seed)
    head = head.to(features.dtype)
    _train_head_on_features(head, features, labels, cfg, seed)
    return head


def finetune(encoder: ClipEncoder, clips: torch.Tensor, labels: torch.Tensor,
             num_classes: int, cfg: EvalConfig, seed: int = 0,
             mode: str = "finetune") -> tuple[ClipEncoder, ProbeHead]:
    """Cross-entropy training of head (+ encoder unless mode="linear").

    Returns fresh modules; the input encoder is never modified.
    """
    if labels.numel() and int(labels.max()) >= num_classes:
        raise ValueError(f"label {int(labels.max())} outside {num_classes} classes")
    encoder = copy.deepcopy(encoder)
    if mode == "linear":
        head = train_linear_probe(encoder, clips, labels, num_classes, cfg, seed)
        return encoder, head
    if mode != "finetune":
        raise ValueError(f"unknown mode {mode!r}")
    dtype = next(encoder.parameters()).dtype
    head = ProbeHead(encoder.embed_dim, num_classes, seed=seed).to(dtype)
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.SGD(params, lr=cfg.finetune_lr, momentum=0.9)
    n = clips.shape[0]
    for epoch in range(cfg.finetune_epochs):
        order = derive_rng(seed, "finetune-order", epoch).permutation(n)
        for lo in range(0, n, cfg.finetune_batch):
            idx = torch.from_numpy(order[lo:lo + cfg.finetune_batch].copy())
            logits = head(encoder(clips[idx].to(dtype)))
            loss = F.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return encoder, head


@torch.no_grad()
def accuracy(encoder: ClipEncoder, head: ProbeHead, clips: torch.Tensor,
             labels: torch.Tensor) -> float:
    logits = head(embed_clips(encoder, clips))
    pred = torch.argmax(logits, dim=1)
    return float((pred == labels).to(torch.float64).mean())


def subclip_starts(total_frames: int, clip_frames: int, count: int) -> list[int]:
    """``count`` uniformly spaced subclip offsets (rounded; duplicates stay)."""
    if total_frames < clip_frames:
        raise ValueError(f"video of {total_frames} frames shorter than a "
                         f"{clip_frames}-frame subclip")
    hi = total_frames - clip_frames
    return [int(x) for x in np.rint(np.linspace(0.0, hi, count))]


@torch.no_grad()
def predict_video(encoder: ClipEncoder, head: ProbeHead, video: torch.Tensor,
                  clip_frames: int, clips_per_video: int = 10,
                  video_id: int = 0, label: int | None = None) -> PredictionReport:
    """Average the softmax outputs of uniformly spaced subclips."""
    dtype = next(encoder.parameters()).dtype
    starts = subclip_starts(video.shape[0], clip_frames, clips_per_video)
    subs = torch.stack([sample_subclip(video, clip_frames, s) for s in starts])
    logits = head(encoder(subs.to(dtype)))
    probs = torch.softmax(logits, dim=1).mean(dim=0)
    probs = probs.to(torch.float64)
    predicted = int(torch.argmax(probs))  # argmax takes the lowest index on ties
    return PredictionReport(video_id=video_id, label=label, predicted=predicted,
                            probabilities=[float(x) for x in probs],
                            entropy=entropy(probs.numpy()))


def occlusion_region(height: int, width: int, cfg: OcclusionConfig) -> tuple[int, int, int, int]:
    rh = int(round(height * cfg.region_fraction))
    rw = int(round(width * cfg.region_fraction))
    return ((height - rh) // 2, (width - rw) // 2, rh, rw)


def occlusion_frames(total_frames: int, cfg: OcclusionConfig) -> list[int]:
    count = int(round(total_frames * cfg.frame_fraction))
    start = (total_frames - count) // 2
    return list(range(start, start + count))


@dataclass
class OcclusionRow:
    clean: PredictionReport
    occluded: PredictionReport

    @property
    def entropy_delta(self) -> float:
        return self.occluded.entropy - self.clean.entropy


@dataclass
class OcclusionSummary:
    rows: list[OcclusionRow] = field(default_factory=list)

    @property
    def mean_entropy_clean(self) -> float:
        return float(np.mean([r.clean.entropy for r in self.rows]))

    @property
    def mean_entropy_occluded(self) -> float:
        return float(np.mean([r.occluded.entropy for r in self.rows]))

    @property
    def mean_entropy_delta(self) -> float:
        return self.mean_entropy_occluded - self.mean_entropy_clean

    @property
    def top1_clean(self) -> float:
        return float(np.mean([r.clean.correct for r in self.rows]))

    @property
    def top1_occluded(self) -> float:
        return float(np.mean([r.occluded.correct for r in self.rows]))


def occlusion_report(encoder: ClipEncoder, head: ProbeHead, videos: torch.Tensor,
                     labels: torch.Tensor, clip_frames: int,
                     occ: OcclusionConfig, clips_per_video: int = 10) -> OcclusionSummary:
    """Paired clean/occluded predictions per video."""
    t, h, w = videos.shape[1], videos.shape[2], videos.shape[3]
    frames = occlusion_frames(t, occ)
    region = occlusion_region(h, w, occ)
    summary = OcclusionSummary()
    for i in range(videos.shape[0]):
        label = int(labels[i])
        clean = predict_video(encoder, head, videos[i], clip_frames,
                              clips_per_video, video_id=i, label=label)
        blocked = occlude(videos[i], frames, region, occ.fill)
        occluded = predict_video(encoder, head, blocked, clip_frames,
                                 clips_per_video, video_id=i, label=label)
        summary.rows.append(OcclusionRow(clean=clean, occluded=occluded))
    return summary


@torch.no_grad()
def attention_map(encoder: ClipEncoder, clip: torch.Tensor) -> torch.Tensor:
    """Per-temporal-slot spatial attention, (T', H, W) in [0, 1].

    Channel-wise mean of absolute last-stage activations, min-max normalized
    per slot (all zeros when the slot is constant), bilinearly upsampled to
    the clip's spatial size.
    """
    if clip.dim() != 4:
        raise ValueError("attention_map expects a single (T, H, W, C) clip")
    h, w = clip.shape[1], clip.shape[2]
    dtype = next(encoder.parameters()).dtype
    feats = encoder.conv_features(clip.unsqueeze(0).to(dtype))[0]  # (C, T', h', w')
    sal = feats.abs().mean(dim=0)                                  # (T', h', w')
    lo = sal.amin(dim=(1, 2), keepdim=True)
    hi = sal.amax(dim=(1, 2), keepdim=True)
    span = hi - lo
    # spans at rounding-noise scale count as constant, else min-max would
    # stretch last-bit noise to full range
    tol = 64 * torch.finfo(sal.dtype).eps * torch.clamp(hi.abs(), min=1.0)
    flat = span <= tol
    span = torch.where(flat, torch.ones_like(span), span)
    sal = torch.where(flat.expand_as(sal), torch.zeros_like(sal), (sal - lo) / span)
    up = F.interpolate(sal.unsqueeze(1), size=(h, w), mode="bilinear",
                       align_corners=False)
    return up.squeeze(1).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def write_occlusion_report(summary: OcclusionSummary, out_dir: str | Path) -> tuple[Path, Path]:
    """CSV of per-video rows plus an aggregate JSON summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows_path = out / "occlusion_rows.csv"
    with rows_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["video_id", "label", "prediction", "correct",
                         "entropy_clean", "entropy_occluded"])
        for r in summary.rows:
            writer.writerow([r.clean.video_id, r.clean.label, r.clean.predicted,
                             int(bool(r.clean.correct)), repr(r.clean.entropy),
                             repr(r.occluded.entropy)])
    summary_path = out / "occlusion_summary.json"
    summary_path.write_text(json.dumps({
        "videos": len(summary.rows),
        "top1_clean": summary.top1_clean,
        "top1_occluded": summary.top1_occluded,
        "mean_entropy_clean": summary.mean_entropy_clean,
        "mean_entropy_occluded": summary.mean_entropy_occluded,
        "mean_entropy_delta": summary.mean_entropy_delta,
    }, indent=2))
    return rows_path, summary_path


def max_entropy(num_classes: int) -> float:
    return math.log(num_classes)
