"""Scalar training objectives.

The contrastive losses classify each query against its positive key and the
queue of negatives via a temperature-scaled softmax. The decayed variant
scales each negative's exponent by its queue weight; the positive always
carries weight 1 (it is the newest key by construction). The generator's
objective is the mean L1 gap between the embeddings of the frame-dropped and
intact clips, which the generator maximizes and the encoder implicitly
minimizes through the contrastive game.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .memqueue import NORM_TOLERANCE


@dataclass
class ContrastiveBatch:
    """Inputs of one contrastive step. All embedding rows are unit norm."""

    queries: torch.Tensor       # (B, d)
    positives: torch.Tensor     # (B, d)
    negatives: torch.Tensor     # (N, d), newest first
    weights: torch.Tensor       # (N,), decay weights aligned with negatives
    temperature: float

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.queries.shape != self.positives.shape:
            raise ValueError("queries and positives must have matching shapes")
        if self.negatives.numel() == 0:
            raise ValueError("at least one negative key is required")
        if self.weights.shape[0] != self.negatives.shape[0]:
            raise ValueError(f"{self.weights.shape[0]} weights for "
                             f"{self.negatives.shape[0]} negatives")
        if bool((self.weights < 0).any()):
            raise ValueError("decay weights must be non-negative")
        for name, rows in (("queries", self.queries), ("positives", self.positives),
                           ("negatives", self.negatives)):
            norms = torch.linalg.vector_norm(rows.detach(), dim=1)
            if bool((torch.abs(norms - 1.0) > NORM_TOLERANCE).any()):
                raise ValueError(f"{name} rows must be unit norm within {NORM_TOLERANCE}")


def _logits(batch: ContrastiveBatch) -> tuple[torch.Tensor, torch.Tensor]:
    pos = (batch.queries * batch.positives).sum(dim=1) / batch.temperature  # (B,)
    neg = batch.queries @ batch.negatives.T / batch.temperature             # (B, N)
    return pos, neg


def infonce(batch: ContrastiveBatch) -> torch.Tensor:
    """Plain contrastive loss; queue weights are ignored."""
    batch.validate()
    pos, neg = _logits(batch)
    denom = torch.cat([pos.unsqueeze(1), neg], dim=1)
    return (torch.logsumexp(denom, dim=1) - pos).mean()


def decayed_infonce(batch: ContrastiveBatch) -> torch.Tensor:
    """Contrastive loss with each negative's exponent scaled by its decay
    weight. Zero weights drop the negative out of the denominator entirely."""
    batch.validate()
    pos, neg = _logits(batch)
    log_w = torch.log(batch.weights.to(neg.dtype))  # -inf at weight 0 is fine
    denom = torch.cat([pos.unsqueeze(1), neg + log_w.unsqueeze(0)], dim=1)
    return (torch.logsumexp(denom, dim=1) - pos).mean()


def discriminator_objective(batch: ContrastiveBatch) -> torch.Tensor:
    """The encoder's adversarial-phase loss; identical to the decayed
    contrastive loss (all-ones weights recover the plain form)."""
    return decayed_infonce(batch)


def generator_objective(query_emb: torch.Tensor, full_emb: torch.Tensor) -> torch.Tensor:
    """Mean L1 distance between frame-dropped and intact embeddings.

    The generator is trained to maximize this value, so its gradient step
    minimizes the negation.
    """
    if query_emb.shape != full_emb.shape:
        raise ValueError(f"embedding shapes differ: {tuple(query_emb.shape)} vs "
                         f"{tuple(full_emb.shape)}")
    return torch.abs(query_emb - full_emb).sum(dim=-1).mean()
