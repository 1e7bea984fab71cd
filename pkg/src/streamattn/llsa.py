"""Low-latency streaming attention (LLSA).

Every frame carries ``A + 1`` channels; channel ``c`` of frame ``t`` is the
variant computed with exactly ``c`` frames of look-ahead. Output ``(t, c)`` is
rooted at the anchor ``s = t - (A - c)`` and attends

* past slots ``(u, A)`` for ``u`` in ``[s - B, s]``, and
* future slots ``(s + j, A - j)`` for ``j`` in ``[1, A]``,

clipped to the sequence. Band column ``m`` is time ``s - B + m``, read from
channel ``A`` when ``m <= B`` and channel ``A + B - m`` otherwise. Outputs
``(s, A), (s + 1, A - 1), ..., (s + A, 0)`` therefore share one key/value set,
and no slot depends on raw input beyond ``t + c``, so stacking layers does not
add latency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .accounting import record
from .frames import BandSpec


@dataclass(frozen=True)
class ChanneledInputs:
    """Per-channel queries/keys/values, ``(N, C, d)`` or ``(G, N, C, d)``."""

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        q, k, v = self.queries, self.keys, self.values
        if q.ndim not in (3, 4) or k.ndim != q.ndim or v.ndim != q.ndim:
            raise ValueError("channeled inputs must be (N, C, d) or (G, N, C, d)")
        if q.shape[:-1] != k.shape[:-1] or q.shape[:-1] != v.shape[:-1]:
            raise ValueError(f"shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
        if q.shape[-1] != k.shape[-1]:
            raise ValueError("queries and keys must share d_k")

    @property
    def n_frames(self) -> int:
        return self.queries.shape[-3]

    @property
    def n_channels(self) -> int:
        return self.queries.shape[-2]

    @property
    def d_k(self) -> int:
        return self.queries.shape[-1]

    def batched(self):
        if self.queries.ndim == 4:
            return self.queries, self.keys, self.values
        return self.queries[None], self.keys[None], self.values[None]


@dataclass(frozen=True)
class ChanneledGrad:
    d_queries: np.ndarray
    d_keys: np.ndarray
    d_values: np.ndarray


@dataclass(frozen=True)
class ChannelScores:
    probs: np.ndarray  # (G, N, C, W); invalid slots exactly 0
    band: BandSpec


def channelize(x, look_ahead: int) -> np.ndarray:
    """Duplicate a frame sequence into ``look_ahead + 1`` identical channels.

    Works on ``(..., N, d)`` and returns ``(..., N, A + 1, d)``.
    """
    if look_ahead < 0:
        raise ValueError("look_ahead must be >= 0")
    x = np.asarray(x)
    out_shape = x.shape[:-1] + (look_ahead + 1, x.shape[-1])
    return np.ascontiguousarray(np.broadcast_to(x[..., None, :], out_shape))


def select_output_channel(y, c: int) -> np.ndarray:
    y = np.asarray(y)
    n_channels = y.shape[-2]
    if not 0 <= c < n_channels:
        raise ValueError(f"channel {c} out of range [0, {n_channels - 1}]")
    return y[..., c, :]


def slot_source(t: int, c: int, m: int, band: BandSpec) -> tuple[int, int]:
    """(time, channel) read by column ``m`` of output ``(t, c)``, before clipping."""
    A, B = band.look_ahead, band.look_back
    u = t - (A - c) - B + m
    ch = A if m <= B else A + B - m
    return u, ch


def llsa_score_evaluations(n_frames: int, band: BandSpec) -> int:
    """Score count ignoring edge clipping: (A + 1) times the SA count."""
    return (band.look_ahead + 1) * n_frames * band.receptive_field()


def _check(inp: ChanneledInputs, band: BandSpec):
    if inp.n_channels != band.look_ahead + 1:
        raise ValueError(
            f"{inp.n_channels} channels given but look_ahead={band.look_ahead} needs "
            f"{band.look_ahead + 1}"
        )


def llsa_forward(inp: ChanneledInputs, band: BandSpec):
    """Channeled banded attention. Returns ``(output, ChannelScores)``."""
    _check(inp, band)
    q, k, v = inp.batched()
    G, N, C, _ = q.shape
    dtype = np.result_type(q, k, v)
    q, k, v = (np.ascontiguousarray(a, dtype=dtype) for a in (q, k, v))
    probs = np.zeros((G, N, C, band.receptive_field()), dtype=dtype)
    record("llsa_scores", probs.size, probs.itemsize)
    scale = 1.0 / np.sqrt(inp.d_k)
    y = _kernels.kernel("llsa_forward")(q, k, v, band.look_back, band.look_ahead, scale, probs)
    return (y[0] if inp.queries.ndim == 3 else y), ChannelScores(probs=probs, band=band)


def llsa_backward(inp: ChanneledInputs, band: BandSpec, cache: ChannelScores, d_output) -> ChanneledGrad:
    _check(inp, band)
    q, k, v = inp.batched()
    if cache.band != band:
        raise RuntimeError(f"cache band {cache.band} != {band}")
    if cache.probs.shape != q.shape[:3] + (band.receptive_field(),):
        raise RuntimeError(f"cache shape {cache.probs.shape} does not match inputs {q.shape}")
    dy = np.asarray(d_output)
    if dy.ndim == 3:
        dy = dy[None]
    if dy.shape != v.shape:
        raise ValueError(f"d_output shape {dy.shape} != output shape {v.shape}")
    dtype = cache.probs.dtype
    q, k, v, dy = (np.ascontiguousarray(a, dtype=dtype) for a in (q, k, v, dy))
    scale = 1.0 / np.sqrt(inp.d_k)
    dq, dk, dv = _kernels.kernel("llsa_backward")(
        q, k, v, cache.probs, dy, band.look_back, band.look_ahead, scale
    )
    if inp.queries.ndim == 3:
        return ChanneledGrad(dq[0], dk[0], dv[0])
    return ChanneledGrad(dq, dk, dv)
