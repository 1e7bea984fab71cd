"""Containers shared by every attention mode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BandSpec:
    """Attention window: ``look_back`` past frames, ``look_ahead`` future frames."""

    look_back: int
    look_ahead: int

    def __post_init__(self):
        if self.look_back < 0 or self.look_ahead < 0:
            raise ValueError(f"band extents must be >= 0, got {self}")

    def receptive_field(self) -> int:
        return self.look_back + self.look_ahead + 1


@dataclass(frozen=True)
class AttentionInputs:
    """Queries/keys/values of one head, time-major.

    Arrays are ``(N, d)`` or carry a leading batch axis ``(G, N, d)``.
    """

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        q, k, v = self.queries, self.keys, self.values
        if q.ndim not in (2, 3) or k.ndim != q.ndim or v.ndim != q.ndim:
            raise ValueError("queries/keys/values must all be 2-D (N, d) or 3-D (G, N, d)")
        if q.shape[:-1] != k.shape[:-1] or q.shape[:-1] != v.shape[:-1]:
            raise ValueError(
                f"frame count mismatch: q{q.shape} k{k.shape} v{v.shape}"
            )
        if q.shape[-1] != k.shape[-1]:
            raise ValueError("queries and keys must share d_k")
        if q.shape[-2] < 1 or q.shape[-1] < 1 or v.shape[-1] < 1:
            raise ValueError("empty frame sequence")

    @property
    def n_frames(self) -> int:
        return self.queries.shape[-2]

    @property
    def d_k(self) -> int:
        return self.queries.shape[-1]

    def batched(self):
        """Views with a guaranteed leading batch axis."""
        if self.queries.ndim == 3:
            return self.queries, self.keys, self.values
        return self.queries[None], self.keys[None], self.values[None]


@dataclass(frozen=True)
class GradTriple:
    d_queries: np.ndarray
    d_keys: np.ndarray
    d_values: np.ndarray




def attention_inputs(q, k, v) -> AttentionInputs:
    return AttentionInputs(np.asarray(q), np.asarray(k), np.asarray(v))
