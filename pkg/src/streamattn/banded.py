"""Streaming attention (SA): banded forward and hand-derived backward.

Only the ``look_back + look_ahead + 1`` scores of each frame are computed and
kept. Column ``j`` of a banded row holds time ``t - look_back + j``; windows are
clipped to the sequence and the softmax runs over the clipped extent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .accounting import record
from .frames import AttentionInputs, BandSpec, GradTriple


@dataclass(frozen=True)
class BandedScores:
    probs: np.ndarray  # (G, N, W); invalid columns are exactly 0
    valid_lo: np.ndarray  # (N,) first valid column, inclusive
    valid_hi: np.ndarray  # (N,) last valid column, inclusive
    band: BandSpec

    @property
    def n_frames(self) -> int:
        return self.probs.shape[1]


def valid_extents(n_frames: int, band: BandSpec):
    t = np.arange(n_frames)
    lo = np.maximum(0, t - band.look_back) - (t - band.look_back)
    hi = np.minimum(n_frames - 1, t + band.look_ahead) - (t - band.look_back)
    return lo, hi


def sa_score_elements(n_frames: int, band: BandSpec) -> int:
    return int(n_frames) * band.receptive_field()


def _as_batched(x):
    x = np.asarray(x)
    return x if x.ndim == 3 else x[None]


def sa_forward(inp: AttentionInputs, band: BandSpec):
    """Banded attention. Returns ``(output, BandedScores)``."""
    q, k, v = inp.batched()
    G, N, _ = q.shape
    dtype = np.result_type(q, k, v)
    q, k, v = (np.ascontiguousarray(a, dtype=dtype) for a in (q, k, v))
    probs = np.zeros((G, N, band.receptive_field()), dtype=dtype)
    record("sa_scores", probs.size, probs.itemsize)
    scale = 1.0 / np.sqrt(inp.d_k)
    y = _kernels.kernel("sa_forward")(q, k, v, band.look_back, band.look_ahead, scale, probs)
    lo, hi = valid_extents(N, band)
    cache = BandedScores(probs=probs, valid_lo=lo, valid_hi=hi, band=band)
    return (y[0] if inp.queries.ndim == 2 else y), cache


def sa_backward(inp: AttentionInputs, band: BandSpec, cache: BandedScores, d_output) -> GradTriple:
    q, k, v = inp.batched()
    if cache.band != band:
        raise RuntimeError(f"cache band {cache.band} != {band}")
    if cache.probs.shape != q.shape[:2] + (band.receptive_field(),):
        raise RuntimeError(f"cache shape {cache.probs.shape} does not match inputs {q.shape}")
    dy = _as_batched(d_output)
    if dy.shape != v.shape:
        raise ValueError(f"d_output shape {dy.shape} != output shape {v.shape}")
    dtype = cache.probs.dtype
    q, k, v, dy = (np.ascontiguousarray(a, dtype=dtype) for a in (q, k, v, dy))
    scale = 1.0 / np.sqrt(inp.d_k)
    dq, dk, dv = _kernels.kernel("sa_backward")(
        q, k, v, cache.probs, dy, band.look_back, band.look_ahead, scale
    )
    if inp.queries.ndim == 2:
        return GradTriple(dq[0], dk[0], dv[0])
    return GradTriple(dq, dk, dv)
