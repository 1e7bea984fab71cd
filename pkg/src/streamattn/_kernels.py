"""Hot loops for banded (SA) and channeled (LLSA) attention.

Two interchangeable backends implement the same four kernels:

* ``numba``: explicit per-frame loops compiled with ``@njit``.
* ``numpy``: vectorized over frames, looping only over the band columns.

``STREAMATTN_NUMBA=0`` in the environment forces the numpy backend; it is also
used automatically when numba cannot be imported. Both backends write scores
into a caller-allocated ``probs`` buffer so allocation accounting stays in one
place (see ``banded.py`` / ``llsa.py``).

Shapes: SA tensors are ``(G, N, d)`` with G a flattened batch*heads axis.
LLSA tensors are ``(G, N, C, d)`` with ``C = look_ahead + 1`` channels.
Band column ``j`` of frame ``t`` maps to time ``t - look_back + j``.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _env_wants_numba() -> bool:
    flag = os.environ.get("STREAMATTN_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


# reassociation lets the dot-product loops vectorize; no nan/inf assumptions
_FASTMATH = {"reassoc", "contract"}


# ---------------------------------------------------------------------------
# loop kernels (compiled by numba when available)


def _sa_forward_loops(q, k, v, look_back, look_ahead, scale, probs):
    G, N, dk = q.shape
    dv = v.shape[2]
    y = np.zeros((G, N, dv), dtype=v.dtype)
    for g in range(G):
        for t in range(N):
            lo = max(0, t - look_back)
            hi = min(N - 1, t + look_ahead)
            zmax = -np.inf
            for s in range(lo, hi + 1):
                j = s - t + look_back
                acc = 0.0
                for i in range(dk):
                    acc += q[g, t, i] * k[g, s, i]
                acc *= scale
                probs[g, t, j] = acc
                if acc > zmax:
                    zmax = acc
            total = 0.0
            for s in range(lo, hi + 1):
                j = s - t + look_back
                e = math.exp(probs[g, t, j] - zmax)
                probs[g, t, j] = e
                total += e
            for s in range(lo, hi + 1):
                j = s - t + look_back
                p = probs[g, t, j] / total
                probs[g, t, j] = p
                for i in range(dv):
                    y[g, t, i] += p * v[g, s, i]
    return y


def _sa_backward_loops(q, k, v, probs, dy, look_back, look_ahead, scale):
    G, N, dk = q.shape
    dv_dim = v.shape[2]
    W = look_back + look_ahead + 1
    dq = np.zeros_like(q)
    dk_ = np.zeros_like(k)
    dv = np.zeros_like(v)
    dp = np.zeros(W, dtype=probs.dtype)
    for g in range(G):
        for t in range(N):
            lo = max(0, t - look_back)
            hi = min(N - 1, t + look_ahead)
            inner = 0.0
            for s in range(lo, hi + 1):
                j = s - t + look_back
                acc = 0.0
                for i in range(dv_dim):
                    acc += dy[g, t, i] * v[g, s, i]
                dp[j] = acc
                inner += acc * probs[g, t, j]
            for s in range(lo, hi + 1):
                j = s - t + look_back
                p = probs[g, t, j]
                dz = p * (dp[j] - inner) * scale
                for i in range(dv_dim):
                    dv[g, s, i] += p * dy[g, t, i]
                for i in range(dk):
                    dq[g, t, i] += dz * k[g, s, i]
                    dk_[g, s, i] += dz * q[g, t, i]
    return dq, dk_, dv


def _llsa_forward_loops(q, k, v, look_back, look_ahead, scale, probs):
    G, N, C, dk = q.shape
    dv = v.shape[3]
    W = look_back + look_ahead + 1
    y = np.zeros((G, N, C, dv), dtype=v.dtype)
    for g in range(G):
        for t in range(N):
            for c in range(C):
                base = t - (look_ahead - c) - look_back
                zmax = -np.inf
                for m in range(W):
                    u = base + m
                    if u < 0 or u >= N:
                        continue
                    ch = look_ahead if m <= look_back else look_ahead + look_back - m
                    acc = 0.0
                    for i in range(dk):
                        acc += q[g, t, c, i] * k[g, u, ch, i]
                    acc *= scale
                    probs[g, t, c, m] = acc
                    if acc > zmax:
                        zmax = acc
                total = 0.0
                for m in range(W):
                    u = base + m
                    if u < 0 or u >= N:
                        continue
                    e = math.exp(probs[g, t, c, m] - zmax)
                    probs[g, t, c, m] = e
                    total += e
                for m in range(W):
                    u = base + m
                    if u < 0 or u >= N:
                        continue
                    ch = look_ahead if m <= look_back else look_ahead + look_back - m
                    p = probs[g, t, c, m] / total
                    probs[g, t, c, m] = p
                    for i in range(dv):
                        y[g, t, c, i] += p * v[g, u, ch, i]
    return y


def _llsa_backward_loops(q, k, v, probs, dy, look_back, look_ahead, scale):
    G, N, C, dk = q.shape
    dv_dim = v.shape[3]
    W = look_back + look_ahead + 1
    dq = np.zeros_like(q)
    dk_ = np.zeros_like(k)
    dv = np.zeros_like(v)
    dp = np.zeros(W, dtype=probs.dtype)
    for g in range(G):
        for t in range(N):
            for c in range(C):
                base = t - (look_ahead - c) - look_back
                inner = 0.0
                for m in range(W):
                    u = base + m
                    if u < 0 or u >= N:
                        continue
                    ch = look_ahead if m <= look_back else look_ahead + look_back - m
                    acc = 0.0
                    for i in range(dv_dim):
                        acc += dy[g, t, c, i] * v[g, u, ch, i]
                    dp[m] = acc
                    inner += acc * probs[g, t, c, m]
                for m in range(W):
                    u = base + m
                    if u < 0 or u >= N:
                        continue
                    ch = look_ahead if m <= look_back else look_ahead + look_back - m
                    p = probs[g, t, c, m]
                    dz = p * (dp[m] - inner) * scale
                    for i in range(dv_dim):
                        dv[g, u, ch, i] += p * dy[g, t, c, i]
                    for i in range(dk):
                        dq[g, t, c, i] += dz * k[g, u, ch, i]
                        dk_[g, u, ch, i] += dz * q[g, t, c, i]
    return dq, dk_, dv


# ---------------------------------------------------------------------------
# numpy fallback


def _span(n, offset):
    """Rows t with 0 <= t + offset < n, as a half-open range."""
    return max(0, -offset), min(n, n - offset)


def _softmax_rows_inplace(z):
    # invalid slots hold -inf and become exactly 0
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)


def _sa_forward_numpy(q, k, v, look_back, look_ahead, scale, probs):
    N = q.shape[1]
    probs.fill(-np.inf)
    for j in range(look_back + look_ahead + 1):
        o = j - look_back
        t0, t1 = _span(N, o)
        if t0 >= t1:
            continue
        probs[:, t0:t1, j] = np.einsum("gti,gti->gt", q[:, t0:t1], k[:, t0 + o : t1 + o]) * scale
    _softmax_rows_inplace(probs)
    y = np.zeros(q.shape[:2] + v.shape[2:], dtype=v.dtype)
    for j in range(look_back + look_ahead + 1):
        o = j - look_back
        t0, t1 = _span(N, o)
        if t0 >= t1:
            continue
        y[:, t0:t1] += probs[:, t0:t1, j, None] * v[:, t0 + o : t1 + o]
    return y


def _sa_backward_numpy(q, k, v, probs, dy, look_back, look_ahead, scale):
    N = q.shape[1]
    W = look_back + look_ahead + 1
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    dp = np.zeros_like(probs)
    for j in range(W):
        o = j - look_back
        t0, t1 = _span(N, o)
        if t0 >= t1:
            continue
        dv[:, t0 + o : t1 + o] += probs[:, t0:t1, j, None] * dy[:, t0:t1]
        dp[:, t0:t1, j] = np.einsum("gti,gti->gt", dy[:, t0:t1], v[:, t0 + o : t1 + o])
    # softmax VJP: p * (g - <g, p>)
    dz = probs * (dp - np.sum(dp * probs, axis=-1, keepdims=True)) * scale
    for j in range(W):
        o = j - look_back
        t0, t1 = _span(N, o)
        if t0 >= t1:
            continue
        dq[:, t0:t1] += dz[:, t0:t1, j, None] * k[:, t0 + o : t1 + o]
        dk[:, t0 + o : t1 + o] += dz[:, t0:t1, j, None] * q[:, t0:t1]
    return dq, dk, dv


def _llsa_slots(look_back, look_ahead):
    """(column, input channel, time offset relative to t, output channel) per slot."""
    W = look_back + look_ahead + 1
    for c in range(look_ahead + 1):
        for m in range(W):
            ch = look_ahead if m <= look_back else look_ahead + look_back - m
            yield m, ch, m - look_back - (look_ahead - c), c


def _llsa_forward_numpy(q, k, v, look_back, look_ahead, scale, probs):
    N = q.shape[1]
    probs.fill(-np.inf)
    slots = list(_llsa_slots(look_back, look_ahead))
    for m, ch, o, c in slots:
        t0, t1 = _span(N, o)
        if t0 >= t1:
            continue
        probs[:, t0:t1, c, m] = (
            np.einsum("gti,gti->gt", q[:, t0:t1, c], k[:, t0 + o : t1 + o, ch]) * scale
        )
    _softmax_rows_inplace(probs)
    y = np.zeros(q.shape[:3] + v.shape[3:], dtype=v.dtype)
    for m, ch, o, c in slots:
        t0, t1 = _span(N, o)
        if t0 >= t1:
            continue
        y[:, t0:t1, c] += probs[:, t0:t1, c, m, None] * v[:, t0 + o : t1 + o, ch]
    return y


def _llsa_backward_numpy(q, k, v, probs, dy, look_back, look_ahead, scale):
    N = q.shape[1]
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    dp = np.zeros_like(probs)
    slots = list(_llsa_slots(look_back, look_ahead))
    for m, ch, o, c in slots:
        t0, t1 = _span(N, o)
        if t0 >= t1:
            continue
        dv[:, t0 + o : t1 + o, ch] += probs[:, t0:t1, c, m, None] * dy[:, t0:t1, c]
        dp[:, t0:t1, c, m] = np.einsum("gti,gti->gt", dy[:, t0:t1, c], v[:, t0 + o : t1 + o, ch])
    dz = probs * (dp - np.sum(dp * probs, axis=-1, keepdims=True)) * scale
    for m, ch, o, c in slots:
        t0, t1 = _span(N, o)
        if t0 >= t1:
            continue
        dq[:, t0:t1, c] += dz[:, t0:t1, c, m, None] * k[:, t0 + o : t1 + o, ch]
        dk[:, t0 + o : t1 + o, ch] += dz[:, t0:t1, c, m, None] * q[:, t0:t1, c]
    return dq, dk, dv


NUMPY_KERNELS = {
    "sa_forward": _sa_forward_numpy,
    "sa_backward": _sa_backward_numpy,
    "llsa_forward": _llsa_forward_numpy,
    "llsa_backward": _llsa_backward_numpy,
}

if HAVE_NUMBA:
    NUMBA_KERNELS = {
        "sa_forward": njit(cache=True, fastmath=_FASTMATH)(_sa_forward_loops),
        "sa_backward": njit(cache=True, fastmath=_FASTMATH)(_sa_backward_loops),
        "llsa_forward": njit(cache=True, fastmath=_FASTMATH)(_llsa_forward_loops),
        "llsa_backward": njit(cache=True, fastmath=_FASTMATH)(_llsa_backward_loops),
    }
else:  # pragma: no cover
    NUMBA_KERNELS = None

# plain-python loops, handy as a third independent path in tests
PYTHON_KERNELS = {
    "sa_forward": _sa_forward_loops,
    "sa_backward": _sa_backward_loops,
    "llsa_forward": _llsa_forward_loops,
    "llsa_backward": _llsa_backward_loops,
}

_active = NUMBA_KERNELS if (HAVE_NUMBA and _env_wants_numba()) else NUMPY_KERNELS


def backend_name() -> str:
    return "numba" if _active is NUMBA_KERNELS else "numpy"


def set_backend(name: str) -> None:
    """Switch backends at runtime (benchmarks and tests)."""
    global _active
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not available")
        _active = NUMBA_KERNELS
    elif name == "numpy":
        _active = NUMPY_KERNELS
    else:
        raise ValueError(f"unknown backend {name!r}")


def kernel(name: str):
    return _active[name]
