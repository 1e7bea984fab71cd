"""Multi-head attention and a pre-norm transformer encoder block.

Block topology (fixed)::

    h   = x + W_o . MHA(LN1(x))
    out = h + W_2 . silu(W_1 . LN2(h) + b_1) + b_2

Row-vector convention: a frame ``x`` of width D is projected as ``x @ W``.
Every operation except the attention kernel is frame-local, so in LLSA mode
the same code runs per channel on ``(..., N, C, D)`` activations and the
residual streams stay channel-separated.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .banded import sa_backward, sa_forward
from .dense import build_band_mask, full_mask, maa_backward, maa_forward
from .frames import AttentionInputs, BandSpec
from .llsa import ChanneledInputs, channelize, llsa_backward, llsa_forward
from .numerics import Rng

LN_EPS = 1e-5
MODES = ("aa", "maa", "sa", "llsa")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionMode:
    kind: str
    band: BandSpec | None = None

    def __post_init__(self):
        if self.kind not in MODES:
            raise ConfigError(f"unknown attention mode {self.kind!r}")
        if (self.kind == "aa") != (self.band is None):
            raise ConfigError(f"mode {self.kind!r} {'takes no' if self.kind == 'aa' else 'needs a'} band")

    @property
    def channeled(self) -> bool:
        return self.kind == "llsa"

    @property
    def n_channels(self) -> int:
        return self.band.look_ahead + 1 if self.kind == "llsa" else 1

    def __str__(self):
        if self.band is None:
            return self.kind
        return f"{self.kind}(B={self.band.look_back},A={self.band.look_ahead})"


def mode(kind: str, look_back: int | None = None, look_ahead: int | None = None) -> AttentionMode:
    if kind == "aa":
        return AttentionMode("aa")
    return AttentionMode(kind, BandSpec(look_back, look_ahead))


@dataclass
class BlockParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_1: np.ndarray
    b_1: np.ndarray
    w_2: np.ndarray
    b_2: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    n_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if self.n_heads < 1 or d % self.n_heads:
            raise ConfigError(f"model_dim {d} is not divisible by n_heads {self.n_heads}")

    @property
    def model_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls) if f.name != "n_heads")

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.names()}

    @classmethod
    def init(cls, model_dim: int, n_heads: int, rng: Rng, ffn_dim: int | None = None) -> "BlockParams":
        ffn_dim = ffn_dim or 2 * model_dim
        s = 1.0 / np.sqrt(model_dim)
        return cls(
            w_q=rng.normal((model_dim, model_dim), s),
            w_k=rng.normal((model_dim, model_dim), s),
            w_v=rng.normal((model_dim, model_dim), s),
            w_o=rng.normal((model_dim, model_dim), s),
            w_1=rng.normal((model_dim, ffn_dim), s),
            b_1=np.zeros(ffn_dim),
            w_2=rng.normal((ffn_dim, model_dim), 1.0 / np.sqrt(ffn_dim)),
            b_2=np.zeros(model_dim),
            ln1_g=np.ones(model_dim),
            ln1_b=np.zeros(model_dim),
            ln2_g=np.ones(model_dim),
            ln2_b=np.zeros(model_dim),
            n_heads=n_heads,
        )

    def zeros_like(self) -> "BlockParams":
        return replace(self, **{n: np.zeros_like(a) for n, a in self.arrays().items()})


# ---------------------------------------------------------------------------
# frame-local pieces


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dg, db


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * _sigmoid(x)


def silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def sinusoidal_encoding(n_frames: int, dim: int, start: int = 0) -> np.ndarray:
    t = np.arange(start, start + n_frames, dtype=np.float64)[:, None]
    i = np.arange(dim)[None, :]
    angle = t / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _outer_sum(a, b):
    """sum over leading axes of a^T b, for (..., m) and (..., n)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


# ---------------------------------------------------------------------------
# heads and attention dispatch


def split_heads(x, n_heads: int):
    """(Bt, N, [C], D) -> (Bt*H, N, [C], dk)."""
    bt = x.shape[0]
    dk = x.shape[-1] // n_heads
    y = x.reshape(x.shape[:-1] + (n_heads, dk))
    y = np.moveaxis(y, -2, 1)
    return np.ascontiguousarray(y.reshape((bt * n_heads,) + y.shape[2:]))


def merge_heads(x, n_heads: int):
    """(Bt*H, N, [C], dk) -> (Bt, N, [C], H*dk)."""
    g = x.shape[0]
    y = x.reshape((g // n_heads, n_heads) + x.shape[1:])
    y = np.moveaxis(y, 1, -2)
    return y.reshape(y.shape[:-2] + (n_heads * x.shape[-1],))


def project_qkv(x, params: BlockParams) -> list[AttentionInputs]:
    """Per-head attention inputs for an ``(N, D)`` frame sequence."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.model_dim:
        raise ConfigError(f"expected (N, {params.model_dim}) frames, got {x.shape}")
    q, k, v = x @ params.w_q, x @ params.w_k, x @ params.w_v
    dk = params.head_dim
    return [
        AttentionInputs(q[:, h * dk : (h + 1) * dk], k[:, h * dk : (h + 1) * dk], v[:, h * dk : (h + 1) * dk])
        for h in range(params.n_heads)
    ]


def attend(q, k, v, mode: AttentionMode):
    n = q.shape[1]
    if mode.kind == "llsa":
        return llsa_forward(ChanneledInputs(q, k, v), mode.band)
    inp = AttentionInputs(q, k, v)
    if mode.kind == "sa":
        return sa_forward(inp, mode.band)
    mask = full_mask(n) if mode.kind == "aa" else build_band_mask(n, mode.band)
    return maa_forward(inp, mask)


def attend_backward(q, k, v, mode: AttentionMode, cache, dy):
    if mode.kind == "llsa":
        g = llsa_backward(ChanneledInputs(q, k, v), mode.band, cache, dy)
    elif mode.kind == "sa":
        g = sa_backward(AttentionInputs(q, k, v), mode.band, cache, dy)
    else:
        g = maa_backward(AttentionInputs(q, k, v), cache.mask, cache, dy)
    return g.d_queries, g.d_keys, g.d_values


# ---------------------------------------------------------------------------
# block


def _check_shape(x, params: BlockParams, mode: AttentionMode):
    want = 4 if mode.channeled else 3
    if x.ndim != want:
        layout = "(Bt, N, C, D)" if mode.channeled else "(Bt, N, D)"
        raise ConfigError(f"{mode.kind} block expects {layout}, got {x.shape}")
    if x.shape[-1] != params.model_dim:
        raise ConfigError(f"frame width {x.shape[-1]} != model_dim {params.model_dim}")
    if mode.channeled and x.shape[2] != mode.n_channels:
        raise ConfigError(f"{x.shape[2]} channels given, mode needs {mode.n_channels}")


def _block_forward(x, p: BlockParams, mode: AttentionMode):
    _check_shape(x, p, mode)
    H = p.n_heads
    n1, ln1 = layer_norm(x, p.ln1_g, p.ln1_b)
    q = split_heads(n1 @ p.w_q, H)
    k = split_heads(n1 @ p.w_k, H)
    v = split_heads(n1 @ p.w_v, H)
    att, att_cache = attend(q, k, v, mode)
    a = merge_heads(att, H)
    h = x + a @ p.w_o
    n2, ln2 = layer_norm(h, p.ln2_g, p.ln2_b)
    u = n2 @ p.w_1 + p.b_1
    act = silu(u)
    out = h + act @ p.w_2 + p.b_2
    cache = dict(n1=n1, ln1=ln1, q=q, k=k, v=v, att_cache=att_cache, a=a, n2=n2, ln2=ln2, u=u, act=act)
    return out, cache


def _block_backward(dout, p: BlockParams, mode: AttentionMode, cache):
    H = p.n_heads
    grads = {}
    grads["w_2"] = _outer_sum(cache["act"], dout)
    grads["b_2"] = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    du = (dout @ p.w_2.T) * silu_grad(cache["u"])
    grads["w_1"] = _outer_sum(cache["n2"], du)
    grads["b_1"] = du.reshape(-1, du.shape[-1]).sum(axis=0)
    dn2 = du @ p.w_1.T
    dh_ln, grads["ln2_g"], grads["ln2_b"] = layer_norm_backward(dn2, p.ln2_g, cache["ln2"])
    dh = dout + dh_ln

    grads["w_o"] = _outer_sum(cache["a"], dh)
    da = split_heads(dh @ p.w_o.T, H)
    dq, dk, dv = attend_backward(cache["q"], cache["k"], cache["v"], mode, cache["att_cache"], da)
    dq, dk, dv = merge_heads(dq, H), merge_heads(dk, H), merge_heads(dv, H)
    n1 = cache["n1"]
    grads["w_q"] = _outer_sum(n1, dq)
    grads["w_k"] = _outer_sum(n1, dk)
    grads["w_v"] = _outer_sum(n1, dv)
    dn1 = dq @ p.w_q.T + dk @ p.w_k.T + dv @ p.w_v.T
    dx_ln, grads["ln1_g"], grads["ln1_b"] = layer_norm_backward(dn1, p.ln1_g, cache["ln1"])
    return dh + dx_ln, BlockParams(n_heads=p.n_heads, **grads)


def _with_batch(x, mode: AttentionMode):
    x = np.asarray(x, dtype=np.float64)
    unbatched = x.ndim == (3 if mode.channeled else 2)
    return (x[None] if unbatched else x), unbatched


def encoder_block_forward(x, params: BlockParams, mode: AttentionMode, return_cache: bool = False):
    """One encoder block on ``(N, D)`` / ``(Bt, N, D)`` (or channeled in LLSA mode)."""
    xb, unbatched = _with_batch(x, mode)
    out, cache = _block_forward(xb, params, mode)
    cache["unbatched"] = unbatched
    out = out[0] if unbatched else out
    return (out, cache) if return_cache else out


def encoder_block_backward(d_output, params: BlockParams, mode: AttentionMode, cache):
    """Returns ``(d_input, BlockParams of gradients)``."""
    if cache is None or "att_cache" not in cache:
        raise RuntimeError("encoder_block_backward needs the cache from a forward pass")
    dout, _ = _with_batch(d_output, mode)
    dx, grads = _block_backward(dout, params, mode, cache)
    return (dx[0] if cache["unbatched"] else dx), grads


# ---------------------------------------------------------------------------
# stack


def stack_forward(x, blocks: list[BlockParams], mode: AttentionMode, return_cache: bool = False):
    """Positional encoding, then the blocks.

    Input is ``(N, D)`` or ``(Bt, N, D)``. In LLSA mode the encoded input is
    channelized once and the designated channel ``A`` is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    unbatched = x.ndim == 2
    xb = x[None] if unbatched else x
    h = xb + sinusoidal_encoding(xb.shape[1], xb.shape[2])
    if mode.channeled:
        h = channelize(h, mode.band.look_ahead)
    caches = []
    for p in blocks:
        h, c = _block_forward(h, p, mode)
        caches.append(c)
    out = h[:, :, -1, :] if mode.channeled else h
    out = out[0] if unbatched else out
    if return_cache:
        return out, dict(blocks=caches, unbatched=unbatched, channeled_shape=h.shape)
    return out


def stack_forward_all_channels(x, blocks: list[BlockParams], mode: AttentionMode):
    """LLSA stack output keeping every channel, ``(Bt, N, C, D)``."""
    x = np.asarray(x, dtype=np.float64)
    xb = x[None] if x.ndim == 2 else x
    h = xb + sinusoidal_encoding(xb.shape[1], xb.shape[2])
    h = channelize(h, mode.band.look_ahead)
    for p in blocks:
        h, _ = _block_forward(h, p, mode)
    return h


def stack_backward(d_output, blocks: list[BlockParams], mode: AttentionMode, cache):
    dout = np.asarray(d_output, dtype=np.float64)
    if cache["unbatched"]:
        dout = dout[None]
    if mode.channeled:
        dh = np.zeros(cache["channeled_shape"])
        dh[:, :, -1, :] = dout
    else:
        dh = dout
    grads = []
    for p, c in zip(reversed(blocks), reversed(cache["blocks"])):
        dh, g = _block_backward(dh, p, mode, c)
        grads.append(g)
    grads.reverse()
    if mode.channeled:
        dh = dh.sum(axis=2)  # channelize duplicated the input
    return (dh[0] if cache["unbatched"] else dh), grads
