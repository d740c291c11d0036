"""FIFO dictionary of momentum-encoded keys with positional decay weights.

Keys live in a bounded queue ordered newest (position 0) to oldest. A key at
position ``i`` contributes to the contrastive denominator with weight
``decay ** i``: the longer a key has been in the queue, the less it counts.
The exponent is the queue position, not the wall-clock step; each batch
enqueue advances every older key's position by the batch size.
"""

from __future__ import annotations

import math

import torch

NORM_TOLERANCE = 1e-4


def decay_weight(t: float, i: int) -> float:
    """t ** i via exp(i * ln t); exact 1.0 at i == 0 and stable for tiny t."""
    if not 0.0 < t <= 1.0:
        raise ValueError(f"decay base must be in (0, 1], got {t}")
    if i < 0:
        raise ValueError(f"position must be non-negative, got {i}")
    return math.exp(i * math.log(t))


class DecayedQueue:
    """Bounded newest-first key store.

    ``enqueue_batch`` is the single mutating operation and needs exclusive
    access; ``weights``/``snapshot`` are read-only.
    """

    def __init__(self, capacity: int, decay: float = 1.0):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        if not 0.0 < decay <= 1.0:
            raise ValueError(f"decay base must be in (0, 1], got {decay}")
        self.capacity = capacity
        self.decay = decay
        self._keys: list[torch.Tensor] = []      # newest first
        self._steps: list[int] = []
        self._weight_cache = torch.empty(0, dtype=torch.float64)

    def __len__(self) -> int:
        return len(self._keys)

    @property
    def entry_steps(self) -> list[int]:
        return list(self._steps)

    def enqueue_batch(self, keys: torch.Tensor, step: int) -> None:
        """Insert rows of ``keys`` at positions 0..b-1 (row 0 newest), push
        existing entries back by b, evict beyond capacity oldest-first."""
        if keys.dim() == 1:
            keys = keys.unsqueeze(0)
        if keys.dim() != 2:
            raise ValueError(f"keys must be (b, d), got shape {tuple(keys.shape)}")
        norms = torch.linalg.vector_norm(keys, dim=1)
        bad = torch.abs(norms - 1.0) > NORM_TOLERANCE
        if bool(bad.any()):
            worst = float(norms[bad][0])
            raise ValueError(f"key norm {worst:.6f} deviates from 1 by more than "
                             f"{NORM_TOLERANCE}")
        incoming = [keys[i].detach().clone() for i in range(keys.shape[0])]
        self._keys = (incoming + self._keys)[: self.capacity]
        self._steps = ([step] * len(incoming) + self._steps)[: self.capacity]

    def weights(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        """Per-position decay weights, element j = decay_weight(decay, j)."""
        n = len(self._keys)
        if n > self._weight_cache.numel():
            self._weight_cache = torch.tensor(
                [decay_weight(self.decay, j) for j in range(n)], dtype=torch.float64)
        return self._weight_cache[:n].to(dtype)

    def snapshot(self) -> tuple[torch.Tensor, torch.Tensor]:
        """(keys matrix newest-first, weight vector). Read-only; errors when
        empty."""
        if not self._keys:
            raise ValueError("snapshot of an empty queue")
        matrix = torch.stack(self._keys)
        return matrix, self.weights(dtype=matrix.dtype)

    # -- checkpoint plumbing -------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "decay": self.decay,
            "keys": torch.stack(self._keys) if self._keys else torch.empty(0),
            "steps": list(self._steps),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "DecayedQueue":
        queue = cls(state["capacity"], state["decay"])
        keys = state["keys"]
        if keys.numel():
            queue._keys = [keys[i].clone() for i in range(keys.shape[0])]
            queue._steps = list(state["steps"])
        return queue
