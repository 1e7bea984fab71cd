"""Acceptance gate: seven criteria, one PASS/FAIL line each."""

import csv
import io
import itertools
import time

import numpy as np
import pytest

from streamattn import cli
from streamattn.banded import sa_backward, sa_forward, sa_score_elements
from streamattn.block import mode, stack_forward
from streamattn.dense import build_band_mask, maa_backward, maa_forward, maa_score_elements
from streamattn.experiments import StackSpec, SyntheticTask, schedule_ablation
from streamattn.frames import AttentionInputs, BandSpec
from streamattn.llsa import ChanneledInputs, channelize, llsa_backward, llsa_forward
from streamattn.numerics import Rng, finite_difference_grad
from streamattn.streaming import LatencyReport, StackConfig, causality_probe, latency_frames, run_stream


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail, elapsed):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({elapsed:.1f}s) {detail}", flush=True)

    return emit


def test_criterion_1_banded_equals_masked_dense(report):
    t0 = time.perf_counter()
    worst_f = worst_b = 0.0
    for n, d, A, B, seed in itertools.product((4, 8, 16, 32), (1, 2, 4), (0, 1, 2, 8), (0, 1, 2, 8), range(3)):
        rng = Rng(seed)
        q, k, v, g = (rng.normal((n, d)) for _ in range(4))
        inp, band = AttentionInputs(q, k, v), BandSpec(B, A)
        mask = build_band_mask(n, band)
        y, cache = sa_forward(inp, band)
        y_ref, dense = maa_forward(inp, mask)
        worst_f = max(worst_f, float(np.max(np.abs(y - y_ref))))
        got, ref = sa_backward(inp, band, cache, g), maa_backward(inp, mask, dense, g)
        for a, b in ((got.d_queries, ref.d_queries), (got.d_keys, ref.d_keys), (got.d_values, ref.d_values)):
            worst_b = max(worst_b, float(np.max(np.abs(a - b))))
    elapsed = time.perf_counter() - t0
    ok = worst_f <= 1e-10 and worst_b <= 1e-8 and elapsed < 30
    report(1, ok, f"forward {worst_f:.2e} <= 1e-10, backward {worst_b:.2e} <= 1e-8", elapsed)
    assert ok


def _fd_relative(fn, arrays, analytic):
    worst, coords = 0.0, 0
    for arr, ga in zip(arrays, analytic):

        def f(x, arr=arr):
            saved = arr.copy()
            arr[...] = x.reshape(arr.shape)
            try:
                return fn()
            finally:
                arr[...] = saved

        err, n = cli.max_relative_error(ga, finite_difference_grad(f, arr.copy(), h=1e-6), floor=1e-8)
        worst, coords = max(worst, err), coords + n
    return worst, coords


def test_criterion_2_gradients_match_finite_differences(report):
    t0 = time.perf_counter()
    worst = {"sa": 0.0, "llsa": 0.0}
    counts = {"sa": 0, "llsa": 0}
    for i in range(24):
        rng = Rng(1000 + i)
        n, d, B, A = (int(rng.integers(lo, hi)) for lo, hi in ((1, 9), (1, 4), (0, 4), (0, 4)))
        band = BandSpec(B, A)

        q, k, v, g = (rng.normal((n, d)) for _ in range(4))
        inp = AttentionInputs(q, k, v)
        _, cache = sa_forward(inp, band)
        gr = sa_backward(inp, band, cache, g)
        err, _ = _fd_relative(lambda: float(np.sum(sa_forward(AttentionInputs(q, k, v), band)[0] * g)),
                              [q, k, v], [gr.d_queries, gr.d_keys, gr.d_values])
        worst["sa"], counts["sa"] = max(worst["sa"], err), counts["sa"] + 1

        q, k, v, g = (rng.normal((n, A + 1, d)) for _ in range(4))
        cin = ChanneledInputs(q, k, v)
        _, cache = llsa_forward(cin, band)
        gr = llsa_backward(cin, band, cache, g)
        err, _ = _fd_relative(lambda: float(np.sum(llsa_forward(ChanneledInputs(q, k, v), band)[0] * g)),
                              [q, k, v], [gr.d_queries, gr.d_keys, gr.d_values])
        worst["llsa"], counts["llsa"] = max(worst["llsa"], err), counts["llsa"] + 1
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-5 and min(counts.values()) >= 20 and elapsed < 60
    report(2, ok, f"{counts['sa']}+{counts['llsa']} instances, worst relative sa {worst['sa']:.2e}, "
                  f"llsa {worst['llsa']:.2e} <= 1e-5", elapsed)
    assert ok


def test_criterion_3_duplicated_channels_match_shifted_bands(report):
    t0 = time.perf_counter()
    worst = 0.0
    for n, A, B, seed in itertools.product((1, 2, 5, 9, 17, 32), range(5), range(5), range(2)):
        rng = Rng(seed * 100 + n)
        q, k, v = (rng.normal((n, 3)) for _ in range(3))
        y, _ = llsa_forward(ChanneledInputs(channelize(q, A), channelize(k, A), channelize(v, A)), BandSpec(B, A))
        for c in range(A + 1):
            ref, _ = sa_forward(AttentionInputs(q, k, v), BandSpec(B + A - c, c))
            worst = max(worst, float(np.max(np.abs(y[:, c] - ref))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10
    report(3, ok, f"worst channel deviation {worst:.2e} <= 1e-12", elapsed)
    assert ok


def test_criterion_4_latency_and_causality(report):
    t0 = time.perf_counter()
    table = {
        ("sa", 8): 1.92, ("llsa", 8): 0.16, ("sa", 16): 3.84, ("llsa", 16): 0.32,
    }
    got = {key: LatencyReport.of(latency_frames(key[0], key[1], 12), 0.020).seconds for key in table}
    latency_ok = got == table

    horizons_ok, details = True, []
    n, t = 40, 30
    for kind, A, B in (("sa", 2, 3), ("sa", 3, 1), ("llsa", 2, 3), ("llsa", 3, 1)):
        config = StackConfig.random(mode(kind, B, A), 4, 8, 2, seed=A)
        expect = 4 * A if kind == "sa" else A
        first = causality_probe(config, n, t)
        # direct check: outputs before the horizon are bit-identical
        rng = Rng(0)
        x = rng.normal((n, 8))
        xp = x.copy()
        xp[t] += 1e-3 * rng.normal(8)
        diff = np.abs(stack_forward(xp, config.blocks, config.mode) - stack_forward(x, config.blocks, config.mode))
        tail_zero = bool(np.all(diff[: t - expect] == 0.0)) and bool(np.any(diff[t - expect] != 0.0))
        horizons_ok &= first == t - expect and tail_zero
        details.append(f"{kind} A={A}: {t - first if first is not None else None}")
    elapsed = time.perf_counter() - t0
    ok = latency_ok and horizons_ok and elapsed < 30
    report(4, ok, f"latencies {got}; horizons " + ", ".join(details), elapsed)
    assert ok


def _r_squared(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    return 1.0 - float(resid @ resid) / float(((y - y.mean()) ** 2).sum())


def test_criterion_5_memory_accounting(report):
    t0 = time.perf_counter()
    example_ok = sa_score_elements(6000, BandSpec(119, 0)) == 720_000 and maa_score_elements(6000) == 36_000_000

    args = cli.parse_args(["bench-memory", "--nt", "1000", "--dk", "64", "--heads", "8,16",
                           "--windows", "10:490:10", "--repeats", "5"])
    rows = list(csv.DictReader(io.StringIO(cli.cmd_bench_memory(args))))
    means = [r for r in rows if r["repeat"] == "mean"]
    per_repeat = [r for r in rows if r["repeat"] != "mean"]
    grid_ok = len(means) == 2 * 2 * 49 and len(per_repeat) == 5 * len(means)
    fits = []
    for heads in ("8", "16"):
        sa = [r for r in means if r["mode"] == "sa" and r["n_heads"] == heads]
        windows = [int(r["look_back"]) + int(r["look_ahead"]) + 1 for r in sa]
        fits.append(_r_squared(windows, [int(r["score_elements"]) for r in sa]))
        grid_ok &= all(int(r["score_elements"]) == 1000 * w for r, w in zip(sa, windows))
        dense = {int(r["score_elements"]) for r in means if r["mode"] == "maa" and r["n_heads"] == heads}
        grid_ok &= dense == {1000 * 1000}
    bytes_ok = all(int(r["peak_score_bytes"]) == 8 * int(r["score_elements"]) for r in rows)
    elapsed = time.perf_counter() - t0
    ok = example_ok and grid_ok and bytes_ok and min(fits) >= 0.999 and elapsed < 300
    report(5, ok, f"720000 vs 36000000: {example_ok}; SA fit R^2 {min(fits):.6f}; MAA constant at 1e6: {grid_ok}", elapsed)
    assert ok


def test_criterion_6_streaming_equals_offline(report):
    t0 = time.perf_counter()
    worst, configs = 0.0, 0
    for kind, B, A, layers, n in itertools.product(("sa", "maa", "llsa"), (0, 1, 3), (0, 1, 3), (1, 2, 4), (1, 2, 7, 20)):
        config = StackConfig.random(mode(kind, B, A), layers, 8, 2, seed=B + 4 * A + 16 * layers)
        frames = Rng(n).normal((n, 8))
        outs, _, _ = run_stream(config, frames)
        worst = max(worst, float(np.max(np.abs(outs - stack_forward(frames, config.blocks, config.mode)))))
        configs += 1
    for n in (1, 5, 20):
        config = StackConfig.random(mode("aa"), 2, 8, 2, seed=n)
        frames = Rng(n).normal((n, 8))
        outs, _, _ = run_stream(config, frames)
        worst = max(worst, float(np.max(np.abs(outs - stack_forward(frames, config.blocks, config.mode)))))
        configs += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 60
    report(6, ok, f"{configs} configurations, worst |streamed - offline| {worst:.2e} <= 1e-10", elapsed)
    assert ok


def test_criterion_7_toy_training_trend(report):
    t0 = time.perf_counter()
    shares = (0.0, 0.25, 0.5, 1.0)
    table = np.array([
        [r["loss"] for r in schedule_ablation(SyntheticTask(seed=s), StackSpec(), shares, seed=s, total_steps=200)]
        for s in range(3)
    ])
    med = np.median(table, axis=0)
    sa_only, sa_then_llsa, llsa_only = med[0], med[1], med[3]
    ordering = llsa_only <= sa_then_llsa <= sa_only
    inversions = int(np.sum(np.diff(med) > 0))
    elapsed = time.perf_counter() - t0
    ok = ordering and inversions <= 1 and elapsed < 900
    report(7, ok, f"median LLSA-inference loss by LLSA share { {s: round(float(m), 4) for s, m in zip(shares, med)} }; "
                  f"ordering {ordering}, inversions {inversions}", elapsed)
    assert ok
