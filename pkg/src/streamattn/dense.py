"""Dense acausal attention (AA) and masked acausal attention (MAA).

This path is deliberately plain: it materializes every N x N score and is the
correctness and memory baseline for the banded kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .accounting import record
from .frames import AttentionInputs, BandSpec, GradTriple

# masked scores; exp(-1e30 - max) underflows to exactly 0 in double precision
MASK_VALUE = -1e30


@dataclass(frozen=True)
class BandMask:
    rows: np.ndarray  # (N, N) bool
    band: BandSpec

    @property
    def n_frames(self) -> int:
        return self.rows.shape[0]


@dataclass(frozen=True)
class DenseCache:
    probs: np.ndarray  # (G, N, N) post-softmax
    mask: BandMask | None


def _unbatch(x, like):
    return x[0] if like.ndim == 2 else x


def build_band_mask(n_frames: int, band: BandSpec) -> BandMask:
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    t = np.arange(n_frames)
    offset = t[None, :] - t[:, None]  # key time minus query time
    rows = (offset >= -band.look_back) & (offset <= band.look_ahead)
    return BandMask(rows=rows, band=band)


def full_mask(n_frames: int) -> BandMask:
    n = n_frames - 1
    return build_band_mask(n_frames, BandSpec(n, n))


def maa_score_elements(n_frames: int) -> int:
    return int(n_frames) * int(n_frames)


def aa_forward(inp: AttentionInputs) -> np.ndarray:
    q, k, v = inp.batched()
    scale = 1.0 / np.sqrt(inp.d_k)
    z = (q @ k.transpose(0, 2, 1)) * scale
    record("dense_scores", z.size, z.itemsize)
    z -= z.max(axis=-1, keepdims=True)
    a = np.exp(z)
    a /= a.sum(axis=-1, keepdims=True)
    return _unbatch(a @ v, inp.queries)


def maa_forward(inp: AttentionInputs, mask: BandMask):
    """Masked dense attention. Returns ``(output, cache)``."""
    if mask.n_frames != inp.n_frames:
        raise ValueError(f"mask is {mask.n_frames} frames, inputs are {inp.n_frames}")
    q, k, v = inp.batched()
    scale = 1.0 / np.sqrt(inp.d_k)
    z = (q @ k.transpose(0, 2, 1)) * scale
    record("dense_scores", z.size, z.itemsize)
    outside = ~mask.rows
    np.copyto(z, MASK_VALUE, where=outside)
    z -= z.max(axis=-1, keepdims=True)
    # exp(MASK_VALUE - max) underflows to 0; skip libm's slow underflow path
    np.exp(z, out=z, where=mask.rows)
    np.copyto(z, 0.0, where=outside)
    z /= z.sum(axis=-1, keepdims=True)
    y = z @ v
    return _unbatch(y, inp.queries), DenseCache(probs=z, mask=mask)


def maa_backward(inp: AttentionInputs, mask: BandMask, cache: DenseCache, d_output) -> GradTriple:
    q, k, v = inp.batched()
    p = cache.probs
    if cache.mask is not mask and (
        cache.mask is None or not np.array_equal(cache.mask.rows, mask.rows)
    ):
        raise RuntimeError("cache was produced with a different mask")
    if p.shape != q.shape[:2] + (q.shape[1],):
        raise RuntimeError(f"cache shape {p.shape} does not match inputs {q.shape}")
    dy = np.asarray(d_output)
    if dy.ndim == 2:
        dy = dy[None]
    if dy.shape != v.shape:
        raise ValueError(f"d_output shape {dy.shape} != output shape {v.shape}")
    scale = 1.0 / np.sqrt(inp.d_k)
    dv = p.transpose(0, 2, 1) @ dy
    dp = dy @ v.transpose(0, 2, 1)
    dz = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
    # masked probabilities are exactly 0, so their dz vanishes too
    dq = (dz @ k) * scale
    dk = (dz.transpose(0, 2, 1) @ q) * scale
    like = inp.queries
    return GradTriple(_unbatch(dq, like), _unbatch(dk, like), _unbatch(dv, like))
