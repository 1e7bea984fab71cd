"""``streamattn`` command line: oracle suites, benchmarks, latency, training, streaming.

Every command writes CSV to stdout (or ``--out``) and diagnostics to stderr.
Exit status is 0 when every tolerance holds, 1 on a breach, 2 on bad usage.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import _kernels
from .accounting import accounting
from .banded import sa_backward, sa_forward, sa_score_elements
from .block import (
    BlockParams,
    ConfigError,
    encoder_block_backward,
    encoder_block_forward,
    mode as make_mode,
    stack_forward,
)
from .dense import build_band_mask, maa_backward, maa_forward, maa_score_elements
from .experiments import (
    OptimizerConfig,
    StackSpec,
    SyntheticTask,
    parse_schedule,
    rows_to_csv,
    schedule_ablation,
    train,
)
from .formats import load_blocks, read_frames, save_blocks, write_frames
from .frames import AttentionInputs, BandSpec
from .llsa import ChanneledInputs, channelize, llsa_backward, llsa_forward
from .numerics import Rng, finite_difference_grad
from .streaming import StackConfig, latency_frames, run_stream

log = logging.getLogger("streamattn")

FORWARD_TOL = 1e-10
BACKWARD_TOL = 1e-8
DUPLICATION_TOL = 1e-12
GRAD_REL_TOL = 1e-5
GRAD_MAGNITUDE_FLOOR = 1e-8
STREAM_TOL = 1e-10


class Breach(Exception):
    """A tolerance was exceeded; carries the CSV already produced."""


def _int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _range_list(text: str) -> list[int]:
    """``lo:hi:step`` (inclusive) or a comma list."""
    text = str(text)
    if ":" in text:
        lo, hi, step = (int(x) for x in text.split(":"))
        return list(range(lo, hi + 1, step))
    return _int_list(text)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _dtype(args) -> np.dtype:
    return np.dtype(np.float32 if args.precision == "f32" else np.float64)


def _require_f64(args, what: str):
    if args.precision != "f64":
        raise ConfigError(f"{what} runs in double precision only")


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def _pool_map(fn, items, parallel: bool):
    if parallel and len(items) > 1:
        with ProcessPoolExecutor() as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


# ---------------------------------------------------------------------------
# equivalence


def _corrupt_first_score(inp: AttentionInputs, band: BandSpec, y, cache):
    """Test hook: bump one softmax weight of frame 0 and recompute that output row."""
    probs = cache.probs[0]
    col = band.look_back  # the frame's own key
    probs[0, col] += 0.25
    v = inp.values
    lo = max(0, -band.look_back)
    row = np.zeros(v.shape[-1])
    for j in range(band.receptive_field()):
        u = 0 - band.look_back + j
        if lo <= u < v.shape[0]:
            row += probs[0, j] * v[u]
    y = y.copy()
    y[0] = row
    return y


def _equivalence_rows(n, d, B, A, seed, fault):
    band = BandSpec(B, A)
    rng = Rng(seed)
    q, k, v, g = (rng.normal((n, d)) for _ in range(4))
    inp = AttentionInputs(q, k, v)
    y_sa, c_sa = sa_forward(inp, band)
    if fault:
        y_sa = _corrupt_first_score(inp, band, y_sa, c_sa)
    mask = build_band_mask(n, band)
    y_maa, c_maa = maa_forward(inp, mask)
    g_sa = sa_backward(inp, band, c_sa, g)
    g_maa = maa_backward(inp, mask, c_maa, g)
    fwd = float(np.max(np.abs(y_sa - y_maa)))
    bwd = max(
        float(np.max(np.abs(a - b)))
        for a, b in zip(
            (g_sa.d_queries, g_sa.d_keys, g_sa.d_values), (g_maa.d_queries, g_maa.d_keys, g_maa.d_values)
        )
    )
    rows = [
        ("sa_vs_maa_forward", n, d, B, A, seed, "", fwd, FORWARD_TOL),
        ("sa_vs_maa_backward", n, d, B, A, seed, "", bwd, BACKWARD_TOL),
    ]
    chan = ChanneledInputs(channelize(q, A), channelize(k, A), channelize(v, A))
    y_ll, _ = llsa_forward(chan, band)
    for c in range(A + 1):
        ref, _ = sa_forward(inp, BandSpec(B + A - c, c))
        err = float(np.max(np.abs(y_ll[:, c] - ref)))
        rows.append(("llsa_duplication", n, d, B, A, seed, c, err, DUPLICATION_TOL))
    return rows


def cmd_equivalence(args) -> str:
    if args.window is not None:
        nt = args.nt if args.nt is not None else 6000
        la = min(args.lookahead, args.window - 1)
        band = BandSpec(args.window - 1 - la, la)
        sa_n, dense_n = sa_score_elements(nt, band), maa_score_elements(nt)
        return _rows_csv(
            ["n_frames", "window", "sa_score_elements", "dense_score_elements", "ratio"],
            [(nt, args.window, sa_n, dense_n, _fmt(sa_n / dense_n))],
        )
    _require_f64(args, "equivalence")
    grid_n = [args.nt] if args.nt is not None else [4, 8, 16, 32]
    grid_d = [args.dk] if args.dk is not None else [1, 2, 4]
    extents = _int_list(args.extents)
    seeds = [args.seed + i for i in range(args.repeats)]
    points = [(n, d, B, A, s) for n in grid_n for d in grid_d for B in extents for A in extents for s in seeds]
    rows, bad = [], []
    for i, (n, d, B, A, s) in enumerate(points):
        for r in _equivalence_rows(n, d, B, A, s, fault=args.inject_fault and i == 0):
            ok = r[7] <= r[8]
            rows.append(tuple(_fmt(x) for x in r) + ("pass" if ok else "FAIL",))
            if not ok:
                bad.append(rows[-1])
    header = ["check", "n_frames", "d_k", "look_back", "look_ahead", "seed", "channel", "max_abs_err", "tolerance", "status"]
    out = _rows_csv(header, rows)
    log.info("equivalence: %d rows, %d failing", len(rows), len(bad))
    for r in bad:
        log.error("tolerance breach: %s", ",".join(str(x) for x in r))
    if bad:
        raise Breach(out)
    return out


# ---------------------------------------------------------------------------
# gradcheck


def max_relative_error(analytic, numeric, floor: float = GRAD_MAGNITUDE_FLOOR) -> tuple[float, int]:
    """Worst ``|a - n| / max(|a|, |n|)`` over coordinates whose magnitude exceeds ``floor``."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    mag = np.maximum(np.abs(a), np.abs(n))
    sel = mag > floor
    if not sel.any():
        return 0.0, 0
    return float(np.max(np.abs(a - n)[sel] / mag[sel])), int(sel.sum())


def _fd_against(fn, arrays, analytic):
    """Check each array in ``arrays`` against its analytic gradient, perturbing in place."""
    worst, count = 0.0, 0
    for arr, ga in zip(arrays, analytic):
        def f(x, arr=arr):
            saved = arr.copy()
            arr[...] = x.reshape(arr.shape)
            try:
                return fn()
            finally:
                arr[...] = saved

        num = finite_difference_grad(f, arr.copy())
        e, c = max_relative_error(ga, num)
        worst, count = max(worst, e), count + c
    return worst, count


def _grad_instance(target: str, rng: Rng):
    n = int(rng.integers(1, 9))
    d = int(rng.integers(1, 4))
    B = int(rng.integers(0, 4))
    A = int(rng.integers(0, 4))
    band = BandSpec(B, A)
    if target == "sa_backward":
        q, k, v = (rng.normal((n, d)) for _ in range(3))
        g = rng.normal((n, d))
        inp = AttentionInputs(q, k, v)
        y, cache = sa_forward(inp, band)
        gr = sa_backward(inp, band, cache, g)
        fn = lambda: float(np.sum(sa_forward(AttentionInputs(q, k, v), band)[0] * g))  # noqa: E731
        err, cnt = _fd_against(fn, [q, k, v], [gr.d_queries, gr.d_keys, gr.d_values])
    elif target == "llsa_backward":
        q, k, v = (rng.normal((n, A + 1, d)) for _ in range(3))
        g = rng.normal((n, A + 1, d))
        inp = ChanneledInputs(q, k, v)
        y, cache = llsa_forward(inp, band)
        gr = llsa_backward(inp, band, cache, g)
        fn = lambda: float(np.sum(llsa_forward(ChanneledInputs(q, k, v), band)[0] * g))  # noqa: E731
        err, cnt = _fd_against(fn, [q, k, v], [gr.d_queries, gr.d_keys, gr.d_values])
    else:
        kind = target.split(":")[1]
        m = make_mode(kind, B, A)
        p = BlockParams.init(4, 2, rng)
        x = rng.normal((n, A + 1, 4)) if kind == "llsa" else rng.normal((n, 4))
        g = rng.normal(x.shape)
        out, cache = encoder_block_forward(x, p, m, return_cache=True)
        dx, gp = encoder_block_backward(g, p, m, cache)
        fn = lambda: float(np.sum(encoder_block_forward(x, p, m) * g))  # noqa: E731
        err, cnt = _fd_against(fn, [x, p.w_q, p.w_k, p.w_1], [dx, gp.w_q, gp.w_k, gp.w_1])
    return n, d, B, A, err, cnt


def cmd_gradcheck(args) -> str:
    _require_f64(args, "gradcheck")
    targets = ["sa_backward", "llsa_backward"] + [f"block:{k}" for k in ("aa", "maa", "sa", "llsa")]
    rows, bad = [], []
    worst = None
    for target in targets:
        count = args.instances if not target.startswith("block") else max(1, args.instances // 4)
        for i in range(count):
            seed = args.seed + i
            n, d, B, A, err, cnt = _grad_instance(target, Rng(seed).spawn(hash(target) % 997))
            ok = err <= GRAD_REL_TOL
            row = (target, i, seed, n, d, B, A, cnt, _fmt(err), GRAD_REL_TOL, "pass" if ok else "FAIL")
            rows.append(row)
            if worst is None or err > float(worst[8]):
                worst = row
            if not ok:
                bad.append(row)
    rows.append(("worst",) + worst[1:])
    header = ["target", "instance", "seed", "n_frames", "d_k", "look_back", "look_ahead", "coords_checked",
              "max_rel_err", "tolerance", "status"]
    out = _rows_csv(header, rows)
    log.info("gradcheck: worst %s seed=%s rel=%s", worst[0], worst[2], worst[8])
    for r in bad:
        log.error("tolerance breach: %s", ",".join(str(x) for x in r))
    if bad:
        raise Breach(out)
    return out


# ---------------------------------------------------------------------------
# memory benchmark


@lru_cache(maxsize=4)
def _bench_inputs(nt, dk, heads, seed, dtype):
    rng = Rng(seed)
    return [tuple(rng.normal((nt, dk)).astype(dtype) for _ in range(3)) for _ in range(heads)]


def _bench_point(job):
    kind, nt, dk, heads, B, A, repeat, seed, dtype = job
    band = BandSpec(B, A)
    data = _bench_inputs(nt, dk, heads, seed, dtype)
    mask = build_band_mask(nt, band) if kind == "maa" else None
    label = "sa_scores" if kind == "sa" else "dense_scores"
    with accounting() as acc:
        t0 = time.perf_counter()
        for q, k, v in data:  # heads run one after another
            inp = AttentionInputs(q, k, v)
            if kind == "sa":
                sa_forward(inp, band)
            else:
                maa_forward(inp, mask)
        wall = (time.perf_counter() - t0) * 1e3
        elements, nbytes = acc.peak_elements(label), acc.peak_bytes(label)
    return (kind, nt, heads, dk, B, A, elements, nbytes, wall, repeat)


def cmd_bench_memory(args) -> str:
    nt = args.nt if args.nt is not None else 1000
    dk = args.dk if args.dk is not None else 64
    dtype = _dtype(args)
    windows = _range_list(args.windows)
    heads_grid = _int_list(args.heads) if args.heads else [8, 16]
    jobs = []
    for kind in _modes(args.mode, ("sa", "maa")):
        for heads in heads_grid:
            for w in windows:
                A = min(args.lookahead, w - 1)
                for r in range(args.repeats):
                    jobs.append((kind, nt, dk, heads, w - 1 - A, A, r, args.seed + r, dtype))
    # run repeat-major so each cached input set serves a whole sweep, then restore grid order
    order = sorted(range(len(jobs)), key=lambda i: (jobs[i][0], jobs[i][3], jobs[i][6]))
    done = dict(zip(order, _pool_map(_bench_point, [jobs[i] for i in order], args.parallel)))
    results = [done[i] for i in range(len(jobs))]
    rows = []
    by_point: dict = {}
    for res in results:
        rows.append(res[:8] + (_fmt(res[8]), res[9]))
        by_point.setdefault(res[:8], []).append(res[8])
        expect = sa_score_elements(nt, BandSpec(res[4], res[5])) if res[0] == "sa" else maa_score_elements(nt)
        if res[6] != expect or res[7] != expect * dtype.itemsize:
            raise Breach(f"accounting mismatch at {res}: expected {expect} elements")
        if len(by_point[res[:8]]) == args.repeats:
            rows.append(res[:8] + (_fmt(float(np.mean(by_point[res[:8]]))), "mean"))
    header = ["mode", "n_frames", "n_heads", "d_k", "look_back", "look_ahead", "score_elements",
              "peak_score_bytes", "wall_ms", "repeat"]
    return _rows_csv(header, rows)


def _modes(text, default):
    if text in (None, "", "all"):
        return list(default)
    return [m.strip() for m in str(text).split(",")]


# ---------------------------------------------------------------------------
# kernel benchmark (numba vs numpy)


def cmd_bench_kernels(args) -> str:
    nt = args.nt if args.nt is not None else 1000
    dk = args.dk if args.dk is not None else 64
    dtype = _dtype(args)
    backends = ["numpy"] + (["numba"] if _kernels.HAVE_NUMBA else [])
    rng = Rng(args.seed)
    rows = []
    previous = _kernels.backend_name()
    try:
        for w in _range_list(args.windows):
            A = min(args.lookahead, w - 1)
            band = BandSpec(w - 1 - A, A)
            q, k, v, g = (rng.normal((nt, dk)).astype(dtype) for _ in range(4))
            inp = AttentionInputs(q, k, v)
            ref = None
            for backend in backends:
                _kernels.set_backend(backend)
                y, cache = sa_forward(inp, band)  # warm-up (and numba compile)
                diff = 0.0 if ref is None else float(np.max(np.abs(y - ref)))
                ref = y if ref is None else ref
                for r in range(args.repeats):
                    t0 = time.perf_counter()
                    y, cache = sa_forward(inp, band)
                    t1 = time.perf_counter()
                    sa_backward(inp, band, cache, g)
                    t2 = time.perf_counter()
                    rows.append(("sa", backend, nt, dk, band.look_back, A, r,
                                 _fmt((t1 - t0) * 1e3), _fmt((t2 - t1) * 1e3), _fmt(diff)))
    finally:
        _kernels.set_backend(previous)
    header = ["kernel", "backend", "n_frames", "d_k", "look_back", "look_ahead", "repeat",
              "forward_ms", "backward_ms", "max_abs_diff_vs_numpy"]
    return _rows_csv(header, rows)


# ---------------------------------------------------------------------------
# latency


def cmd_latency(args) -> str:
    rows = []
    if args.lookaheads:
        look_aheads = _int_list(args.lookaheads)
    else:
        look_aheads = [args.lookahead] if args.lookahead is not None else [8, 16]
    for kind in _modes(args.mode, ("sa", "llsa")):
        for A in look_aheads:
            frames = latency_frames(kind, A, args.layers)
            secs = "" if frames is None else _fmt(frames * args.frame_ms / 1000.0)
            rows.append((kind, A, args.layers, _fmt(float(args.frame_ms)), "" if frames is None else frames, secs))
    return _rows_csv(["mode", "look_ahead", "n_layers", "frame_ms", "latency_frames", "latency_s"], rows)


# ---------------------------------------------------------------------------
# training


def _task(args, seed) -> SyntheticTask:
    kw = dict(seed=seed)
    if args.nt is not None:
        kw["n_frames"] = args.nt
    if args.n_sequences is not None:
        kw["n_sequences"] = args.n_sequences
    return SyntheticTask(**kw)


def _stack(args) -> StackSpec:
    heads = _int_list(args.heads)[0] if args.heads else StackSpec.n_heads
    dk = args.dk if args.dk is not None else StackSpec.model_dim // StackSpec.n_heads
    return StackSpec(model_dim=heads * dk, n_heads=heads, n_layers=args.layers,
                     look_back=args.lookback, look_ahead=args.lookahead)


def _optim(args) -> OptimizerConfig:
    kw = {}
    if args.lr is not None:
        kw["lr"] = args.lr
    if args.batch_size is not None:
        kw["batch_size"] = args.batch_size
    return OptimizerConfig(**kw)


def cmd_train_toy(args) -> str:
    _require_f64(args, "training")
    schedule = parse_schedule(args.schedule)
    rep = train(_task(args, args.seed), _stack(args), schedule, _optim(args), seed=args.seed)
    for k, v in rep.eval_final.items():
        log.info("eval %s: init %.5f -> final %.5f", k, rep.eval_init[k], v)
    if args.checkpoint:
        m = rep.model
        save_blocks(args.checkpoint, m.blocks, extra=m.tensors())
        log.info("checkpoint written to %s", args.checkpoint)
    return rep.to_csv()


def _ablation_seed(job):
    args, seed = job
    return schedule_ablation(_task(args, seed), _stack(args), _float_list(args.shares), seed=seed,
                             total_steps=args.total_steps, optim=_optim(args))


def cmd_ablation(args) -> str:
    _require_f64(args, "training")
    seeds = [args.seed + i for i in range(args.repeats)]
    rows = [r for chunk in _pool_map(_ablation_seed, [(args, s) for s in seeds], args.parallel) for r in chunk]
    return rows_to_csv(rows)


# ---------------------------------------------------------------------------
# streaming demo


def cmd_stream_demo(args) -> str:
    kind = _modes(args.mode, ("llsa",))[0]
    m = make_mode(kind, args.lookback, args.lookahead)
    if args.checkpoint:
        blocks, _ = load_blocks(args.checkpoint)
        config = StackConfig(blocks, m)
    else:
        heads = _int_list(args.heads)[0] if args.heads else 2
        dk = args.dk if args.dk is not None else 8
        config = StackConfig.random(m, args.layers, heads * dk, heads, args.seed)
    if args.input:
        frames = read_frames(args.input)
    else:
        nt = args.nt if args.nt is not None else 64
        frames = Rng(args.seed).spawn(7).normal((nt, config.model_dim)).astype(_dtype(args)).astype(np.float64)
    if frames.shape[1] != config.model_dim:
        raise ConfigError(f"frames have width {frames.shape[1]}, stack expects {config.model_dim}")
    outs, state, first = run_stream(config, frames, args.frame_ms / 1000.0)
    offline = stack_forward(frames, config.blocks, m)
    diff = float(np.max(np.abs(outs - offline))) if len(frames) else 0.0
    if args.save_output:
        write_frames(args.save_output, outs, precision=4 if args.precision == "f32" else 8)
    lat = config.latency()
    log.info("streamed %d frames, max |streamed - offline| = %.3e", len(frames), diff)
    ok = diff <= STREAM_TOL
    row = (str(m), len(frames), config.model_dim, config.n_layers, "" if lat is None else lat,
           "" if first is None else first, _fmt(diff), STREAM_TOL, "pass" if ok else "FAIL")
    out = _rows_csv(["mode", "n_frames", "model_dim", "n_layers", "latency_frames", "first_emit_after",
                     "max_abs_diff", "tolerance", "status"], [row])
    if not ok:
        raise Breach(out)
    return out


# ---------------------------------------------------------------------------
# argument parsing


COMMANDS = {
    "equivalence": cmd_equivalence,
    "gradcheck": cmd_gradcheck,
    "bench-memory": cmd_bench_memory,
    "bench-kernels": cmd_bench_kernels,
    "latency": cmd_latency,
    "train-toy": cmd_train_toy,
    "ablation": cmd_ablation,
    "stream-demo": cmd_stream_demo,
}

# per-command defaults layered over the shared ones
_DEFAULTS = {
    "equivalence": dict(repeats=3, lookahead=0),
    "gradcheck": dict(),
    "bench-memory": dict(repeats=5, lookahead=0),
    "bench-kernels": dict(repeats=3, lookahead=0, windows="10,50,130,250,490"),
    "latency": dict(lookahead=None, layers=12),
    "train-toy": dict(),
    "ablation": dict(repeats=3),
    "stream-demo": dict(),
}


def _common(p: argparse.ArgumentParser):
    g = p.add_argument_group("shared options")
    g.add_argument("--config", help="key=value file (# comments); flags given on the command line win")
    g.add_argument("--mode", help="attention mode(s): aa, maa, sa, llsa (comma list where a command takes several)")
    g.add_argument("--nt", type=int, help="number of frames")
    g.add_argument("--dk", type=int, help="per-head key/query width")
    g.add_argument("--heads", help="head count (comma list for bench-memory)")
    g.add_argument("--lookback", type=int, default=StackSpec.look_back, help="look-back frames B")
    g.add_argument("--lookahead", type=int, default=StackSpec.look_ahead, help="look-ahead frames A")
    g.add_argument("--layers", type=int, default=StackSpec.n_layers, help="encoder layers L")
    g.add_argument("--frame-ms", type=float, default=20.0, help="frame duration in milliseconds")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--repeats", type=int, default=1, help="repeats, or seed count for seeded grids")
    g.add_argument("--out", help="write CSV here instead of stdout")
    g.add_argument("--parallel", action="store_true", help="spread grid points over processes")
    g.add_argument("--precision", choices=("f32", "f64"), default="f64")
    g.add_argument("--backend", choices=("auto", "numba", "numpy"), default="auto", help="kernel backend")
    g.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="streamattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}
    for name in COMMANDS:
        p = sub.add_parser(name, help=(COMMANDS[name].__doc__ or "").strip() or None)
        _common(p)
        subs[name] = p
    subs["equivalence"].add_argument("--window", type=int, help="report score counts for this window at --nt")
    subs["equivalence"].add_argument("--extents", default="0,1,2,8", help="look-back/look-ahead grid")
    subs["equivalence"].add_argument("--inject-fault", action="store_true", help="corrupt one score (self-test)")
    subs["gradcheck"].add_argument("--instances", type=int, default=20, help="random instances per kernel")
    for name in ("bench-memory", "bench-kernels"):
        subs[name].add_argument("--windows", default="10:490:10", help="lo:hi:step or comma list")
    subs["latency"].add_argument("--lookaheads", help="comma list of look-ahead values")
    for name in ("train-toy", "ablation"):
        subs[name].add_argument("--n-sequences", type=int)
        subs[name].add_argument("--lr", type=float)
        subs[name].add_argument("--batch-size", type=int)
    subs["train-toy"].add_argument("--schedule", default="sa:150,llsa:50", help="e.g. sa:150,llsa:50")
    subs["train-toy"].add_argument("--checkpoint", help="write trained parameters (BSAT)")
    subs["ablation"].add_argument("--shares", default="0,0.25,0.5,1", help="LLSA step shares")
    subs["ablation"].add_argument("--total-steps", type=int, default=200)
    subs["stream-demo"].add_argument("--input", help="BSAF frame file")
    subs["stream-demo"].add_argument("--checkpoint", help="BSAT block checkpoint")
    subs["stream-demo"].add_argument("--save-output", help="write streamed frames (BSAF)")
    for name, p in subs.items():
        p.set_defaults(**_DEFAULTS[name])
    return parser, subs


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def _apply_config(p: argparse.ArgumentParser, cfg: dict[str, str]):
    actions = {a.dest: a for a in p._actions}
    typed = {}
    for key, raw in cfg.items():
        if key not in actions or key in ("config", "help"):
            raise ConfigError(f"unknown config key {key!r}")
        a = actions[key]
        if isinstance(a, argparse._StoreTrueAction):
            typed[key] = _bool(raw)
        else:
            val = a.type(raw) if a.type else raw
            if a.choices and val not in a.choices:
                raise ConfigError(f"config {key}={raw!r} not in {list(a.choices)}")
            typed[key] = val
    p.set_defaults(**typed)


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        _apply_config(subs[args.command], read_config(args.config))
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except (ConfigError, OSError) as exc:
        print(f"streamattn: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s", force=True)
    if args.backend != "auto":
        _kernels.set_backend(args.backend)
    status = 0
    try:
        text = COMMANDS[args.command](args)
    except Breach as exc:
        text, status = str(exc.args[0]), 1
    except (ConfigError, ValueError, OSError) as exc:
        print(f"streamattn {args.command}: {exc}", file=sys.stderr)
        return 2
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if status:
        print(f"streamattn {args.command}: tolerance breached", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
