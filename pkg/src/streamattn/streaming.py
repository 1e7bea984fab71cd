"""Frame-in / frame-out inference over an encoder stack.

Each layer keeps a ring buffer of post-projection keys/values, so every frame
is projected once per layer. End of stream uses the same clipped windows as
the offline path, which makes streamed output equal to
:func:`streamattn.block.stack_forward` on every frame.

SA / MAA stacks emit frame ``t`` once raw frame ``t + L*A`` has arrived.
LLSA stacks advance along anti-diagonals: after raw frame ``n`` arrives, each
layer computes every slot ``(u, ch)`` with ``u + ch == n``. Those slots share
the anchor ``n - A`` and need nothing newer than raw frame ``n``, so the
designated output ``(n - A, A)`` leaves the stack after only ``A`` frames.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .accounting import record
from .block import AttentionMode, BlockParams, ConfigError, layer_norm, silu, sinusoidal_encoding, stack_forward
from .numerics import Rng

DEFAULT_FRAME_DURATION = 0.020


def latency_frames(mode: AttentionMode | str, look_ahead: int, n_layers: int) -> int | None:
    """Algorithmic look-ahead latency of a stack; ``None`` for unbanded AA (offline)."""
    kind = mode.kind if isinstance(mode, AttentionMode) else mode
    if n_layers < 1 or look_ahead < 0:
        raise ConfigError("need n_layers >= 1 and look_ahead >= 0")
    if kind == "aa":
        return None
    if kind == "llsa":
        return look_ahead
    if kind in ("sa", "maa"):
        return n_layers * look_ahead
    raise ConfigError(f"unknown mode {kind!r}")


@dataclass(frozen=True)
class LatencyReport:
    frames: int
    seconds: float

    @classmethod
    def of(cls, frames: int, frame_duration: float) -> "LatencyReport":
        return cls(frames=frames, seconds=frames * frame_duration)


@dataclass
class StackConfig:
    blocks: list[BlockParams]
    mode: AttentionMode

    def __post_init__(self):
        if not self.blocks:
            raise ConfigError("stack needs at least one block")
        dims = {p.model_dim for p in self.blocks}
        if len(dims) != 1:
            raise ConfigError(f"blocks disagree on model_dim: {sorted(dims)}")

    @property
    def model_dim(self) -> int:
        return self.blocks[0].model_dim

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def latency(self) -> int | None:
        la = self.mode.band.look_ahead if self.mode.band is not None else 0
        return latency_frames(self.mode, la, self.n_layers)

    @classmethod
    def random(cls, mode: AttentionMode, n_layers: int, model_dim: int, n_heads: int, seed: int) -> "StackConfig":
        rng = Rng(seed)
        return cls([BlockParams.init(model_dim, n_heads, rng) for _ in range(n_layers)], mode)


# ---------------------------------------------------------------------------
# per-frame block pieces


def _project(p: BlockParams, x):
    n1, _ = layer_norm(x, p.ln1_g, p.ln1_b)
    return n1 @ p.w_q, n1 @ p.w_k, n1 @ p.w_v


def _attend_one(p: BlockParams, q, keys, values):
    """Multi-head attention of one query over a (w, D) key/value window."""
    H, dk = p.n_heads, p.head_dim
    out = np.empty(p.model_dim)
    scale = 1.0 / np.sqrt(dk)
    for h in range(H):
        sl = slice(h * dk, (h + 1) * dk)
        z = keys[:, sl] @ q[sl] * scale
        z = np.exp(z - z.max())
        out[sl] = values[:, sl].T @ (z / z.sum())
    return out


def _finish(p: BlockParams, x, att):
    h = x + att @ p.w_o
    n2, _ = layer_norm(h, p.ln2_g, p.ln2_b)
    return h + silu(n2 @ p.w_1 + p.b_1) @ p.w_2 + p.b_2


class _BandedLayer:
    """One SA (or MAA) layer: ring of keys/values plus frames awaiting look-ahead."""

    def __init__(self, p: BlockParams, look_back: int, look_ahead: int):
        self.p = p
        self.B, self.A = look_back, look_ahead
        self.cap = look_back + look_ahead + 1
        self.ring_k = np.zeros((self.cap, p.model_dim))
        self.ring_v = np.zeros((self.cap, p.model_dim))
        self.pending: deque = deque()  # (t, x_t, q_t)
        self.n_in = 0

    def retained_slots(self) -> int:
        # pending frames are always a subset of the ring's time range
        return min(self.n_in, self.cap)

    def _emit(self, t, x, q, hi):
        lo = max(0, t - self.B)
        idx = [s % self.cap for s in range(lo, hi + 1)]
        att = _attend_one(self.p, q, self.ring_k[idx], self.ring_v[idx])
        return _finish(self.p, x, att)

    def push(self, x) -> list:
        u = self.n_in
        q, k, v = _project(self.p, x)
        self.ring_k[u % self.cap] = k
        self.ring_v[u % self.cap] = v
        self.pending.append((u, x, q))
        self.n_in += 1
        out = []
        while self.pending and self.pending[0][0] + self.A <= self.n_in - 1:
            t, xt, qt = self.pending.popleft()
            out.append(self._emit(t, xt, qt, t + self.A))
        return out

    def flush(self) -> list:
        out = []
        while self.pending:
            t, xt, qt = self.pending.popleft()
            out.append(self._emit(t, xt, qt, self.n_in - 1))
        return out


class _LLSALayer:
    """One LLSA layer: ring of channel-A keys/values for the look-back part."""

    def __init__(self, p: BlockParams, look_back: int, look_ahead: int):
        self.p = p
        self.B, self.A = look_back, look_ahead
        self.cap = look_back + 1
        self.ring_k = np.zeros((self.cap, p.model_dim))
        self.ring_v = np.zeros((self.cap, p.model_dim))
        self.ring_count = 0  # channel-A frames stored so far
        self.last_diag = 0

    def retained_slots(self) -> int:
        return min(self.ring_count, self.cap) + self.last_diag

    def step(self, n: int, slots: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
        """Process anti-diagonal ``n``: ``slots`` maps channel -> input at time n - ch."""
        A, B = self.A, self.B
        proj = {ch: _project(self.p, x) for ch, x in slots.items()}
        s = n - A
        if A in proj:
            _, k, v = proj[A]
            self.ring_k[s % self.cap] = k
            self.ring_v[s % self.cap] = v
            self.ring_count += 1
        self.last_diag = len(slots) - (1 if A in slots else 0)
        past = [u % self.cap for u in range(max(0, s - B), s + 1)] if s >= 0 else []
        future = [ch for ch in range(A - 1, -1, -1) if ch in proj]  # times s+1 .. s+A
        keys = np.concatenate([self.ring_k[past]] + [proj[ch][1][None] for ch in future])
        values = np.concatenate([self.ring_v[past]] + [proj[ch][2][None] for ch in future])
        return {ch: _finish(self.p, x, _attend_one(self.p, proj[ch][0], keys, values)) for ch, x in slots.items()}


@dataclass
class StreamState:
    config: StackConfig
    frame_duration: float = DEFAULT_FRAME_DURATION
    ingested: int = 0
    emitted: int = 0
    flushed: bool = False
    layers: list = field(default_factory=list)
    _raw: dict = field(default_factory=dict)
    _offline: list = field(default_factory=list)

    @property
    def declared_latency_frames(self) -> int | None:
        return self.config.latency()

    def latency_report(self) -> LatencyReport:
        frames = self.declared_latency_frames
        if frames is None:
            raise ConfigError("AA stacks have no bounded latency")
        return LatencyReport.of(frames, self.frame_duration)

    def retained_slots(self) -> list[int]:
        return [layer.retained_slots() for layer in self.layers]


def stream_init(config: StackConfig, frame_duration: float = DEFAULT_FRAME_DURATION) -> StreamState:
    if frame_duration <= 0:
        raise ConfigError("frame_duration must be positive")
    mode = config.mode
    state = StreamState(config=config, frame_duration=frame_duration)
    if mode.kind in ("sa", "maa"):
        state.layers = [_BandedLayer(p, mode.band.look_back, mode.band.look_ahead) for p in config.blocks]
    elif mode.kind == "llsa":
        state.layers = [_LLSALayer(p, mode.band.look_back, mode.band.look_ahead) for p in config.blocks]
    return state


def _encode(state: StreamState, frame, t: int):
    return frame + sinusoidal_encoding(1, state.config.model_dim, start=t)[0]


def _record_state(state: StreamState):
    for i, n in enumerate(state.retained_slots()):
        record(f"stream_layer{i}", n, state.config.model_dim * 8)


def _llsa_diag(state: StreamState, n: int, last: int):
    """Run anti-diagonal ``n`` through the stack; ``last`` is the final raw index."""
    A = state.config.mode.band.look_ahead
    slots = {ch: state._raw[n - ch] for ch in range(A + 1) if 0 <= n - ch <= last}
    for layer in state.layers:
        slots = layer.step(n, slots)
    _record_state(state)
    return slots.get(A) if n - A >= 0 else None


def stream_push(state: StreamState, frame) -> np.ndarray | None:
    """Ingest one raw frame; return the next output frame if one is ready."""
    if state.flushed:
        raise RuntimeError("stream already flushed")
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (state.config.model_dim,):
        raise ValueError(f"frame shape {frame.shape} != ({state.config.model_dim},)")
    t = state.ingested
    state.ingested += 1
    mode = state.config.mode
    if mode.kind == "aa":
        state._offline.append(frame)
        return None
    x = _encode(state, frame, t)
    if mode.kind == "llsa":
        A = mode.band.look_ahead
        state._raw[t] = x
        state._raw.pop(t - A - 1, None)
        out = _llsa_diag(state, t, t)
    else:
        outs = [x]
        for layer in state.layers:
            outs = [y for o in outs for y in layer.push(o)]
        _record_state(state)
        out = outs[0] if outs else None
    if out is not None:
        state.emitted += 1
    return out


def stream_flush(state: StreamState) -> list[np.ndarray]:
    """Emit the remaining frames using end-of-sequence clipped windows."""
    if state.flushed:
        return []
    state.flushed = True
    mode = state.config.mode
    n_total = state.ingested
    if n_total == 0:
        return []
    if mode.kind == "aa":
        out = stack_forward(np.stack(state._offline), state.config.blocks, mode)
        state.emitted += len(out)
        return list(out)
    if mode.kind == "llsa":
        A = mode.band.look_ahead
        out = []
        for n in range(n_total, n_total + A):
            y = _llsa_diag(state, n, n_total - 1)
            if y is not None:
                out.append(y)
    else:
        carried: list = []
        for layer in state.layers:
            fed = [y for o in carried for y in layer.push(o)]
            carried = fed + layer.flush()
        out = carried
    state.emitted += len(out)
    return out


def run_stream(config: StackConfig, frames, frame_duration: float = DEFAULT_FRAME_DURATION):
    """Push every frame then flush; returns ``(outputs, state, pushes_before_first_emit)``."""
    state = stream_init(config, frame_duration)
    outs, first = [], None
    for i, f in enumerate(frames):
        y = stream_push(state, f)
        if y is not None:
            outs.append(y)
            if first is None:
                first = i + 1
    outs.extend(stream_flush(state))
    return np.array(outs), state, first


def causality_probe(config: StackConfig, n_frames: int, perturb_index: int, epsilon: float = 1e-3, seed: int = 0) -> int | None:
    """Earliest output index whose designated output moves when one input frame is nudged."""
    if not 0 <= perturb_index < n_frames:
        raise ValueError("perturb_index out of range")
    rng = Rng(seed)
    x = rng.normal((n_frames, config.model_dim))
    xp = x.copy()
    # a random direction: a uniform shift would be cancelled by layer norm
    xp[perturb_index] += epsilon * rng.normal(config.model_dim)
    diff = np.abs(stack_forward(xp, config.blocks, config.mode) - stack_forward(x, config.blocks, config.mode))
    hit = np.nonzero(diff.max(axis=1) > 1e-12)[0]
    return int(hit[0]) if hit.size else None
