"""Encoders and the frame-dropping generator.

The clip encoder doubles as the discriminator of the adversarial game; a
momentum copy of it encodes keys. The generator scores per-frame importance
with a small conv + LSTM stack and drops the top-k frames. Activations are
smooth (GELU) so gradient checks against central differences are well posed.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .seeding import derive_torch_seed


def _to_bcthw(clips: torch.Tensor) -> torch.Tensor:
    """(B, T, H, W, C) or (T, H, W, C) -> (B, C, T, H, W)."""
    if clips.dim() == 4:
        clips = clips.unsqueeze(0)
    if clips.dim() != 5:
        raise ValueError(f"expected a clip batch, got shape {tuple(clips.shape)}")
    return clips.permute(0, 4, 1, 2, 3)


class ClipEncoder(nn.Module):
    """Small 3D-conv encoder: stride-2 spatiotemporal stages, global average
    pooling, linear projection, L2 normalization.

    Each stage normalizes per sample (GroupNorm) before the activation.
    Without it the pooled features of this small stack are dominated by the
    shared bias response and every clip collapses to nearly the same
    embedding, which stalls contrastive training entirely. GroupNorm keeps
    the forward pass independent of batch composition, so embeddings stay a
    pure function of (parameters, clip).
    """

    def __init__(self, in_channels: int = 3, channels=(8, 16, 32), embed_dim: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.embed_dim = embed_dim
        stages = []
        norms = []
        prev = in_channels
        for ch in channels:
            # bias is redundant (and gradient-dead) under the normalization
            stages.append(nn.Conv3d(prev, ch, kernel_size=3, stride=2, padding=1,
                                    bias=False))
            norms.append(nn.GroupNorm(min(4, ch), ch))
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.norms = nn.ModuleList(norms)
        self.head = nn.Linear(prev, embed_dim)

    def conv_features(self, clips: torch.Tensor) -> torch.Tensor:
        """Last-stage activations, (B, C_last, T', H', W')."""
        x = _to_bcthw(clips)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"clip has {x.shape[1]} channels, encoder expects "
                             f"{self.in_channels}")
        for conv, norm in zip(self.stages, self.norms):
            x = F.gelu(norm(conv(x)))
        return x

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        x = self.conv_features(clips)
        x = x.mean(dim=(2, 3, 4))
        z = self.head(x)
        return F.normalize(z, dim=1)


class FrameScorer(nn.Module):
    """Per-frame importance: shared 2D conv features, an LSTM over time, and a
    scalar head. Output is (B, T) raw scores."""

    def __init__(self, in_channels: int = 3, channels=(8, 16), hidden: int = 64):
        super().__init__()
        self.in_channels = in_channels
        convs = []
        prev = in_channels
        for ch in channels:
            convs.append(nn.Conv2d(prev, ch, kernel_size=3, stride=2, padding=1))
            prev = ch
        self.convs = nn.ModuleList(convs)
        self.lstm = nn.LSTM(prev, hidden, batch_first=True)
        self.head = nn.Linear(hidden, 1)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        squeeze = clips.dim() == 4
        if squeeze:
            clips = clips.unsqueeze(0)
        b, t, h, w, c = clips.shape
        if c != self.in_channels:
            raise ValueError(f"clip has {c} channels, scorer expects {self.in_channels}")
        x = clips.permute(0, 1, 4, 2, 3).reshape(b * t, c, h, w)
        for conv in self.convs:
            x = F.gelu(conv(x))
        feats = x.mean(dim=(2, 3)).reshape(b, t, -1)
        out, _ = self.lstm(feats)
        scores = self.head(out).squeeze(-1)
        return scores.squeeze(0) if squeeze else scores


def build_encoder(cfg, seed_tag="init-encoder") -> ClipEncoder:
    """Seeded construction so two runs initialize identically."""
    with torch.random.fork_rng():
        torch.manual_seed(derive_torch_seed(cfg.seed, seed_tag))
        enc = ClipEncoder(channels=tuple(cfg.encoder_channels), embed_dim=cfg.embed_dim)
    return enc.to(_dtype(cfg.dtype))


def build_generator(cfg, seed_tag="init-generator") -> FrameScorer:
    with torch.random.fork_rng():
        torch.manual_seed(derive_torch_seed(cfg.seed, seed_tag))
        gen = FrameScorer(channels=tuple(cfg.generator_channels), hidden=cfg.generator_hidden)
    return gen.to(_dtype(cfg.dtype))


def _dtype(name: str) -> torch.dtype:
    if name == "float32":
        return torch.float32
    if name == "float64":
        return torch.float64
    raise ValueError(f"unsupported dtype {name!r}")


def clone_as_key_encoder(encoder: ClipEncoder) -> ClipEncoder:
    """Momentum copy: starts equal to the encoder, never sees gradients."""
    key = copy.deepcopy(encoder)
    for p in key.parameters():
        p.requires_grad_(False)
    return key


@torch.no_grad()
def momentum_update(key_module: nn.Module, query_module: nn.Module, m: float) -> None:
    """key <- m * key + (1 - m) * query, parameter by parameter."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum coefficient must be in [0, 1], got {m}")
    key_params = dict(key_module.named_parameters())
    query_params = dict(query_module.named_parameters())
    if key_params.keys() != query_params.keys():
        raise ValueError("parameter sets of key and query modules differ")
    for name, kp in key_params.items():
        qp = query_params[name]
        if kp.shape != qp.shape:
            raise ValueError(f"shape mismatch for {name}: {kp.shape} vs {qp.shape}")
        # two rounded products and one rounded sum, exactly the written formula
        # (mul_/add_ with alpha may fuse and round differently)
        kp.copy_(m * kp + (1.0 - m) * qp)


def make_mask(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Keep/drop mask with exactly ``k`` zeros at the k largest scores.

    Ties break toward the lower frame index. Accepts (T,) or (B, T); the
    result has the same shape, dtype matching ``scores``, values in {0, 1}.
    """
    squeeze = scores.dim() == 1
    s = scores.unsqueeze(0) if squeeze else scores
    t = s.shape[-1]
    if not 0 <= k < t:
        raise ValueError(f"drop count {k} out of range for {t} frames")
    order = torch.argsort(s, dim=-1, descending=True, stable=True)
    mask = torch.ones_like(s)
    mask.scatter_(-1, order[..., :k], 0.0)
    return mask.squeeze(0) if squeeze else mask


def random_mask(batch: int, t: int, k: int, rng: np.random.Generator,
                dtype=torch.float32) -> torch.Tensor:
    """(batch, t) masks with a uniformly random k-subset dropped per row."""
    if not 0 <= k < t:
        raise ValueError(f"drop count {k} out of range for {t} frames")
    mask = torch.ones(batch, t, dtype=dtype)
    for i in range(batch):
        drop = rng.choice(t, size=k, replace=False)
        mask[i, torch.from_numpy(np.asarray(drop, dtype=np.int64))] = 0.0
    return mask


def apply_mask(clips: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero out dropped frames; kept frames pass through bit-identically."""
    squeeze = clips.dim() == 4
    c = clips.unsqueeze(0) if squeeze else clips
    m = mask.unsqueeze(0) if mask.dim() == 1 else mask
    if m.shape != c.shape[:2]:
        raise ValueError(f"mask shape {tuple(m.shape)} does not match clip "
                         f"batch/frames {tuple(c.shape[:2])}")
    out = c * m.to(c.dtype)[:, :, None, None, None]
    return out.squeeze(0) if squeeze else out


def generate_query(generator: FrameScorer | None, clips: torch.Tensor, k: int,
                   mode: str, rng: np.random.Generator | None = None,
                   straight_through: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Build the frame-dropped query clip and its hard mask.

    mode "adversarial" scores frames and drops the k most important;
    "random" drops a seeded uniform k-subset; "none" keeps everything.
    With ``straight_through`` the returned clip carries gradients from the
    hard mask back to the scores, which is how the dropout operation reaches
    the generator's weights.
    """
    squeeze = clips.dim() == 4
    batch = clips.unsqueeze(0) if squeeze else clips
    b, t = batch.shape[:2]
    if mode == "none":
        hard = torch.ones(b, t, dtype=batch.dtype)
        query = batch.clone()
    elif mode == "random":
        if rng is None:
            raise ValueError("random mode needs an rng")
        hard = random_mask(b, t, k, rng, dtype=batch.dtype)
        query = apply_mask(batch, hard)
    elif mode == "adversarial":
        if generator is None:
            raise ValueError("adversarial mode needs a generator")
        if straight_through:
            scores = generator(batch)
            hard = make_mask(scores, k)
            # Forward uses the hard mask; backward passes gradients straight
            # through to the scores as if the mask were the score vector.
            # The parentheses matter: (scores - scores.detach()) is exactly
            # zero, so the forward mask stays exactly 0/1.
            soft = hard + (scores - scores.detach())
            query = apply_mask(batch, soft)
        else:
            with torch.no_grad():
                scores = generator(batch)
            hard = make_mask(scores, k)
            query = apply_mask(batch, hard)
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    hard = hard.detach()
    if squeeze:
        return query.squeeze(0), hard.squeeze(0)
    return query, hard
