"""Pretraining: warmup on plain contrastive learning, then alternating
generator/encoder updates, momentum tracking, key enqueueing, checkpoints.

One step processes one batch. During warmup the encoder trains against the
queue with no frame dropout. In the adversarial phase each step first lets
the generator ascend the embedding-gap objective (encoder frozen), then the
encoder defends against a fresh mask from the updated generator, then the
momentum encoder follows and the new keys enter the queue.

All randomness is derived from (seed, purpose, step/epoch), never from shared
global state, so a resumed run replays the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import yaml

from .config import ExperimentConfig, config_from_dict, dump_config
from .data import augment_batch
from .losses import ContrastiveBatch, decayed_infonce, generator_objective
from .memqueue import DecayedQueue
from .models import (build_encoder, build_generator, clone_as_key_encoder,
                     generate_query, momentum_update, _dtype)
from .seeding import derive_rng

METRIC_FIELDS = ["step", "epoch", "phase", "contrast_loss", "gen_l1",
                 "queue_len", "mask_hist"]
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when a logged loss stops being finite."""


@dataclass
class StepMetrics:
    step: int
    epoch: int
    phase: str
    contrast_loss: float | None
    gen_l1: float | None
    queue_len: int
    mask_hist: list[int] | None

    def row(self) -> dict:
        fmt = lambda x: "" if x is None else repr(x)
        hist = "" if self.mask_hist is None else " ".join(str(c) for c in self.mask_hist)
        return {"step": self.step, "epoch": self.epoch, "phase": self.phase,
                "contrast_loss": fmt(self.contrast_loss), "gen_l1": fmt(self.gen_l1),
                "queue_len": self.queue_len, "mask_hist": hist}


@dataclass
class TrainState:
    cfg: ExperimentConfig
    encoder: torch.nn.Module
    key_encoder: torch.nn.Module
    generator: torch.nn.Module
    opt_encoder: torch.optim.Optimizer
    opt_generator: torch.optim.Optimizer
    queue: DecayedQueue
    epoch: int = 0      # completed epochs
    step: int = 0       # batches processed
    history: list[StepMetrics] = field(default_factory=list)


def init_state(cfg: ExperimentConfig) -> TrainState:
    tc = cfg.train
    tc.validate()
    encoder = build_encoder(tc)
    key_encoder = clone_as_key_encoder(encoder)
    generator = build_generator(tc)
    opt_encoder = torch.optim.SGD(encoder.parameters(), lr=tc.lr_encoder,
                                  momentum=tc.sgd_momentum)
    opt_generator = torch.optim.SGD(generator.parameters(), lr=tc.lr_generator,
                                    momentum=tc.sgd_momentum)
    queue = DecayedQueue(tc.queue_capacity, tc.resolved_decay())
    return TrainState(cfg, encoder, key_encoder, generator,
                      opt_encoder, opt_generator, queue)


def _views(state: TrainState, clips: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Independently augmented query/key views of the batch, at model dtype."""
    cfg = state.cfg
    seed, step = cfg.train.seed, state.step
    dtype = _dtype(cfg.train.dtype)
    xq = augment_batch(clips, derive_rng(seed, "aug-query", step), cfg.data, cfg.augment)
    xk = augment_batch(clips, derive_rng(seed, "aug-key", step), cfg.data, cfg.augment)
    return xq.to(dtype), xk.to(dtype)


def _contrastive_update(state: TrainState, queries: torch.Tensor,
                        keys: torch.Tensor) -> float | None:
    """Gradient step on the encoder against the current queue, momentum
    update, then enqueue the new keys. Returns the loss, or None while the
    queue has no negatives yet (the very first batch only seeds the queue)."""
    tc = state.cfg.train
    loss_value = None
    if len(state.queue) > 0:
        negatives, weights = state.queue.snapshot()
        batch = ContrastiveBatch(queries, keys, negatives, weights, tc.temperature)
        loss = decayed_infonce(batch)
        state.opt_encoder.zero_grad()
        loss.backward()
        state.opt_encoder.step()
        loss_value = float(loss.detach())
    momentum_update(state.key_encoder, state.encoder, tc.momentum)
    state.queue.enqueue_batch(keys, state.step)
    return loss_value


def warmup_step(state: TrainState, clips: torch.Tensor) -> StepMetrics:
    """Plain contrastive step: no generator, no frame dropout."""
    xq, xk = _views(state, clips)
    queries = state.encoder(xq)
    with torch.no_grad():
        keys = state.key_encoder(xk)
    loss_value = _contrastive_update(state, queries, keys)
    metrics = StepMetrics(state.step, state.epoch, "warmup", loss_value, None,
                          len(state.queue), None)
    state.step += 1
    return metrics


def adversarial_step(state: TrainState, clips: torch.Tensor) -> StepMetrics:
    """Generator ascent on the embedding gap, then an encoder defense step
    against a fresh mask. Modes "random"/"none" skip the generator update and
    mask accordingly."""
    tc = state.cfg.train
    xq, xk = _views(state, clips)

    gen_value = None
    if tc.mask_mode == "adversarial":
        for p in state.encoder.parameters():
            p.requires_grad_(False)
        query_st, _ = generate_query(state.generator, xq, tc.drop_count,
                                     "adversarial", straight_through=True)
        emb_query = state.encoder(query_st)
        with torch.no_grad():
            emb_full = state.encoder(xq)
        gen_obj = generator_objective(emb_query, emb_full)
        state.opt_generator.zero_grad()
        (-gen_obj).backward()
        state.opt_generator.step()
        for p in state.encoder.parameters():
            p.requires_grad_(True)
        gen_value = float(gen_obj.detach())

    mask_rng = derive_rng(tc.seed, "mask", state.step)
    query, mask = generate_query(state.generator, xq, tc.drop_count, tc.mask_mode,
                                 rng=mask_rng)
    queries = state.encoder(query)
    with torch.no_grad():
        keys = state.key_encoder(xk)
    loss_value = _contrastive_update(state, queries, keys)
    hist = (mask == 0).sum(dim=0).to(torch.long).tolist()
    metrics = StepMetrics(state.step, state.epoch, "adversarial", loss_value,
                          gen_value, len(state.queue), hist)
    state.step += 1
    return metrics


# ---------------------------------------------------------------------------
# Epoch loop, metric log, checkpoints
# ---------------------------------------------------------------------------

def checkpoint_path(out_dir: Path, completed_epochs: int) -> Path:
    return Path(out_dir) / f"checkpoint_{completed_epochs:04d}.pt"


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": dump_config(state.cfg),
        "epoch": state.epoch,
        "step": state.step,
        "encoder": state.encoder.state_dict(),
        "key_encoder": state.key_encoder.state_dict(),
        "generator": state.generator.state_dict(),
        "opt_encoder": state.opt_encoder.state_dict(),
        "opt_generator": state.opt_generator.state_dict(),
        "queue": state.queue.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(cfg: ExperimentConfig, path: str | Path) -> TrainState:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    state = init_state(cfg)
    state.encoder.load_state_dict(payload["encoder"])
    state.key_encoder.load_state_dict(payload["key_encoder"])
    state.generator.load_state_dict(payload["generator"])
    state.opt_encoder.load_state_dict(payload["opt_encoder"])
    state.opt_generator.load_state_dict(payload["opt_generator"])
    state.queue = DecayedQueue.from_state_dict(payload["queue"])
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    return state


def latest_checkpoint(out_dir: str | Path) -> Path | None:
    candidates = sorted(Path(out_dir).glob("checkpoint_[0-9]*.pt"))
    return candidates[-1] if candidates else None


def encoder_from_checkpoint(path: str | Path):
    """(encoder, config) from a saved checkpoint; the generator and optimizer
    state are left behind (only the encoder is kept after pretraining)."""
    payload = torch.load(path, weights_only=False)
    cfg = config_from_dict(yaml.safe_load(payload["config"]))
    encoder = build_encoder(cfg.train)
    encoder.load_state_dict(payload["encoder"])
    return encoder, cfg


class MetricLog:
    """Append-only CSV of one row per training step."""

    def __init__(self, path: str | Path, resume_epoch: int | None = None):
        self.path = Path(path)
        if resume_epoch is None or not self.path.exists():
            self.path.write_text(",".join(METRIC_FIELDS) + "\n")
        else:
            self._truncate(resume_epoch)

    def _truncate(self, resume_epoch: int) -> None:
        """Drop rows from epochs the resumed run will replay."""
        with self.path.open() as fh:
            rows = list(csv.DictReader(fh))
        kept = [r for r in rows if int(r["epoch"]) < resume_epoch]
        with self.path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(kept)

    def append(self, metrics: StepMetrics) -> None:
        with self.path.open("a", newline="") as fh:
            csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n").writerow(metrics.row())


def _nan_guard(state: TrainState, metrics: StepMetrics, out_dir: Path | None) -> None:
    values = [v for v in (metrics.contrast_loss, metrics.gen_l1) if v is not None]
    if all(math.isfinite(v) for v in values):
        return
    dump = {
        "step": metrics.step, "epoch": metrics.epoch, "phase": metrics.phase,
        "contrast_loss": metrics.contrast_loss, "gen_l1": metrics.gen_l1,
        "queue_len": metrics.queue_len,
        "encoder_param_norm": float(sum(p.detach().norm() ** 2
                                        for p in state.encoder.parameters()) ** 0.5),
        "recent": [m.row() for m in state.history[-5:]],
    }
    if out_dir is not None:
        (Path(out_dir) / "diverged.json").write_text(json.dumps(dump, indent=2))
    raise TrainingDiverged(f"non-finite loss at step {metrics.step}: {dump}")


def run_pretrain(cfg: ExperimentConfig, train_clips: torch.Tensor,
                 out_dir: str | Path | None = None, resume: bool = False,
                 stop_after_epoch: int | None = None) -> TrainState:
    """Full schedule: warmup epochs then adversarial epochs.

    ``train_clips`` holds the source videos, (N, T_src, H_src, W_src, C) in
    [0, 1]. Checkpoints land in ``out_dir`` every ``checkpoint_every`` epochs;
    with ``resume`` the latest checkpoint there is picked up and the metric
    log is rewound to it. ``stop_after_epoch`` ends the run early after that
    many total completed epochs (used to exercise resume).
    """
    tc = cfg.train
    if tc.threads:
        torch.set_num_threads(tc.threads)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "config.yaml").write_text(dump_config(cfg))

    state = None
    if resume and out_path is not None:
        ckpt = latest_checkpoint(out_path)
        if ckpt is not None:
            state = load_checkpoint(cfg, ckpt)
    if state is None:
        state = init_state(cfg)
        resume = False

    log = None
    if out_path is not None:
        log = MetricLog(out_path / "metrics.csv",
                        resume_epoch=state.epoch if resume else None)

    total_epochs = tc.warmup_epochs + tc.adversarial_epochs
    last_epoch = total_epochs if stop_after_epoch is None \
        else min(total_epochs, stop_after_epoch)
    n = train_clips.shape[0]
    if n == 0:
        raise ValueError("empty training set")

    for epoch in range(state.epoch, last_epoch):
        state.epoch = epoch
        order = derive_rng(tc.seed, "order", epoch).permutation(n)
        step_fn = warmup_step if epoch < tc.warmup_epochs else adversarial_step
        for lo in range(0, n, tc.batch_size):
            idx = torch.from_numpy(order[lo:lo + tc.batch_size].copy())
            metrics = step_fn(state, train_clips[idx])
            state.history.append(metrics)
            if log is not None:
                log.append(metrics)
            _nan_guard(state, metrics, out_path)
        state.epoch = epoch + 1
        if out_path is not None and (
                (epoch + 1) % max(tc.checkpoint_every, 1) == 0
                or epoch + 1 == last_epoch):
            save_checkpoint(state, checkpoint_path(out_path, epoch + 1))
    return state
