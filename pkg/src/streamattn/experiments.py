"""Desk-scale masked-prediction training with switchable attention modes.

The task stands in for masked speech prediction: sequences are sums of
sinusoids plus noise, spans of frames are replaced by a learned mask
embedding, and the model regresses the clean frames under the mask (mean
squared error over masked frames only).

Optimizer: RMSprop without momentum (decay 0.99, eps 1e-8) at a constant
learning rate, after clipping the global gradient norm to 1.0. All parameters
are trained in every phase; a schedule only switches the attention mode.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .block import AttentionMode, BlockParams, ConfigError, stack_backward, stack_forward
from .frames import BandSpec
from .numerics import Rng

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class SyntheticTask:
    seed: int = 0
    n_sequences: int = 1056
    n_frames: int = 32
    dim: int = 8
    mask_prob: float = 0.1
    mask_span: int = 4
    n_sinusoids: int = 3
    max_bin: int = 2
    noise: float = 0.05


@dataclass
class Dataset:
    inputs: np.ndarray  # (S, N, dim) noisy frames
    targets: np.ndarray  # (S, N, dim) clean frames
    mask: np.ndarray  # (S, N) bool, True where masked
    bins: np.ndarray  # (S, n_sinusoids) DFT bins used per sequence

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], self.mask[idx], self.bins[idx])


def span_mask(rng: Rng, n_frames: int, prob: float, span: int) -> np.ndarray:
    """Each admissible start opens a span with probability ``prob``; spans stay in bounds."""
    mask = np.zeros(n_frames, dtype=bool)
    span = min(span, n_frames)
    starts = np.nonzero(rng.random(n_frames - span + 1) < prob)[0]
    for s in starts:
        mask[s : s + span] = True
    return mask


def gen_synthetic_task(task: SyntheticTask) -> Dataset:
    rng = Rng(task.seed)
    S, N, D, K = task.n_sequences, task.n_frames, task.dim, task.n_sinusoids
    t = np.arange(N)
    clean = np.zeros((S, N, D))
    bins = np.zeros((S, K), dtype=np.int64)
    mask = np.zeros((S, N), dtype=bool)
    for i in range(S):
        b = rng.integers(1, task.max_bin + 1, size=K)
        amp = rng.uniform(0.5, 1.5, size=K)
        phase = rng.uniform(0.0, 2 * np.pi, size=K)
        direction = rng.normal((K, D))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        wave = amp[:, None] * np.cos(2 * np.pi * b[:, None] * t[None, :] / N + phase[:, None])
        clean[i] = wave.T @ direction
        bins[i] = b
        if task.mask_prob > 0:
            mask[i] = span_mask(rng, N, task.mask_prob, task.mask_span)
    noisy = clean + task.noise * rng.normal((S, N, D))
    return Dataset(inputs=noisy, targets=clean, mask=mask, bins=bins)


def split(data: Dataset, n_eval: int) -> tuple[Dataset, Dataset]:
    n = len(data)
    if not 0 < n_eval < n:
        raise ValueError(f"n_eval must be in (0, {n})")
    return data.subset(slice(0, n - n_eval)), data.subset(slice(n - n_eval, n))


# ---------------------------------------------------------------------------
# model


@dataclass
class ToyModel:
    blocks: list[BlockParams]
    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    mask_emb: np.ndarray
    band: BandSpec

    HEAD = ("w_in", "b_in", "w_out", "b_out", "mask_emb")

    @classmethod
    def init(cls, dim: int, model_dim: int, n_heads: int, n_layers: int, band: BandSpec, seed: int) -> "ToyModel":
        rng = Rng(seed)
        blocks = [BlockParams.init(model_dim, n_heads, rng) for _ in range(n_layers)]
        return cls(
            blocks=blocks,
            w_in=rng.normal((dim, model_dim), 1.0 / np.sqrt(dim)),
            b_in=np.zeros(model_dim),
            w_out=rng.normal((model_dim, dim), 1.0 / np.sqrt(model_dim)),
            b_out=np.zeros(dim),
            mask_emb=np.zeros(dim),
            band=band,
        )

    def mode(self, kind: str) -> AttentionMode:
        if kind == "aa":
            return AttentionMode("aa")
        return AttentionMode(kind, self.band)

    def params(self) -> list[np.ndarray]:
        out = [getattr(self, n) for n in self.HEAD]
        for p in self.blocks:
            out.extend(p.arrays().values())
        return out

    def tensors(self) -> dict[str, np.ndarray]:
        named = {f"head.{n}": getattr(self, n) for n in self.HEAD}
        named["head.band"] = np.array([self.band.look_back, self.band.look_ahead], dtype=np.float64)
        return named

    def predict(self, data: Dataset, kind: str, return_cache: bool = False):
        m = self.mode(kind)
        xin = np.where(data.mask[..., None], self.mask_emb, data.inputs)
        h = xin @ self.w_in + self.b_in
        out, cache = stack_forward(h, self.blocks, m, return_cache=True)
        pred = out @ self.w_out + self.b_out
        if return_cache:
            return pred, dict(xin=xin, out=out, stack=cache, mode=m)
        return pred


def masked_mse(pred, data: Dataset) -> float:
    n = int(data.mask.sum())
    if n == 0:
        return 0.0
    err = (pred - data.targets)[data.mask]
    return float(np.mean(err * err))


def loss_and_grads(model: ToyModel, data: Dataset, kind: str):
    pred, c = model.predict(data, kind, return_cache=True)
    n = int(data.mask.sum())
    dim = data.inputs.shape[-1]
    if n == 0:
        return 0.0, [np.zeros_like(p) for p in model.params()]
    diff = (pred - data.targets) * data.mask[..., None]
    loss = float(np.sum(diff * diff) / (n * dim))
    dpred = 2.0 * diff / (n * dim)
    g_w_out = c["out"].reshape(-1, c["out"].shape[-1]).T @ dpred.reshape(-1, dim)
    g_b_out = dpred.reshape(-1, dim).sum(axis=0)
    dh, block_grads = stack_backward(dpred @ model.w_out.T, model.blocks, c["mode"], c["stack"])
    g_w_in = c["xin"].reshape(-1, dim).T @ dh.reshape(-1, dh.shape[-1])
    g_b_in = dh.reshape(-1, dh.shape[-1]).sum(axis=0)
    dxin = dh @ model.w_in.T
    g_mask = dxin[data.mask].sum(axis=0)
    grads = [g_w_in, g_b_in, g_w_out, g_b_out, g_mask]
    for g in block_grads:
        grads.extend(g.arrays().values())
    return loss, grads


def evaluate(model: ToyModel, data: Dataset, kind: str) -> float:
    """Mean masked-prediction loss over ``data`` with attention mode ``kind``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty split")
    if kind not in ("aa", "maa", "sa", "llsa"):
        raise ConfigError(f"unknown inference mode {kind!r}")
    return masked_mse(model.predict(data, kind), data)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 3e-3
    decay: float = 0.99
    eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 32


@dataclass(frozen=True)
class StackSpec:
    model_dim: int = 16
    n_heads: int = 2
    n_layers: int = 2
    look_back: int = 2
    look_ahead: int = 2

    @property
    def band(self) -> BandSpec:
        return BandSpec(self.look_back, self.look_ahead)


@dataclass
class TrainReport:
    schedule: str
    seed: int
    steps: list[tuple[int, str, float]] = field(default_factory=list)
    eval_init: dict[str, float] = field(default_factory=dict)
    eval_final: dict[str, float] = field(default_factory=dict)
    model: ToyModel | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["schedule", "seed", "step", "mode", "loss"])
        for step, kind, loss in self.steps:
            w.writerow([self.schedule, self.seed, step, kind, repr(loss)])
        return buf.getvalue()


def schedule_name(schedule) -> str:
    return "+".join(f"{k}:{n}" for k, n in schedule)


def parse_schedule(text: str) -> list[tuple[str, int]]:
    out = []
    for part in text.replace("+", ",").split(","):
        part = part.strip()
        if not part:
            continue
        kind, _, steps = part.partition(":")
        out.append((kind.strip().lower(), int(steps)))
    return out


def train(
    task: SyntheticTask,
    stack: StackSpec,
    schedule,
    optim: OptimizerConfig = OptimizerConfig(),
    seed: int = 0,
    n_eval: int = 32,
    eval_modes=("sa", "llsa"),
) -> TrainReport:
    schedule = list(schedule)
    if not schedule:
        raise ValueError("schedule must not be empty")
    for kind, steps in schedule:
        if steps < 1:
            raise ValueError(f"schedule entry {kind}:{steps} needs at least one step")
        if kind not in ("aa", "maa", "sa", "llsa"):
            raise ConfigError(f"unknown mode {kind!r} in schedule")
    data = gen_synthetic_task(task)
    train_set, eval_set = split(data, n_eval)
    model = ToyModel.init(task.dim, stack.model_dim, stack.n_heads, stack.n_layers, stack.band, seed)
    report = TrainReport(schedule=schedule_name(schedule), seed=seed, model=model)
    report.eval_init = {k: evaluate(model, eval_set, k) for k in eval_modes}

    rng = Rng(seed).spawn(1)
    params = model.params()
    sq = [np.zeros_like(p) for p in params]
    step = 0
    for kind, n_steps in schedule:
        for _ in range(n_steps):
            idx = rng.integers(0, len(train_set), size=min(optim.batch_size, len(train_set)))
            loss, grads = loss_and_grads(model, train_set.subset(idx), kind)
            if not np.isfinite(loss):
                raise TrainingError(step, loss)
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            scale = min(1.0, optim.clip_norm / (norm + 1e-12))
            for p, g, s in zip(params, grads, sq):
                g = g * scale
                s *= optim.decay
                s += (1.0 - optim.decay) * g * g
                p -= optim.lr * g / (np.sqrt(s) + optim.eps)
            report.steps.append((step, kind, loss))
            step += 1
        log.info("%s seed=%d: finished %s phase at step %d", report.schedule, seed, kind, step)
    report.eval_final = {k: evaluate(model, eval_set, k) for k in eval_modes}
    return report


def ablation_schedules(total_steps: int, llsa_shares) -> list[list[tuple[str, int]]]:
    out = []
    for share in llsa_shares:
        n_llsa = int(round(total_steps * share))
        sched = []
        if total_steps - n_llsa > 0:
            sched.append(("sa", total_steps - n_llsa))
        if n_llsa > 0:
            sched.append(("llsa", n_llsa))
        out.append(sched)
    return out


def schedule_ablation(
    task: SyntheticTask,
    stack: StackSpec,
    llsa_shares=(0.0, 0.25, 0.5, 1.0),
    seed: int = 0,
    total_steps: int = 200,
    optim: OptimizerConfig = OptimizerConfig(),
    n_eval: int = 32,
) -> list[dict]:
    """LLSA-inference eval loss for each SA/LLSA split of a fixed step budget."""
    if not llsa_shares:
        raise ValueError("llsa_shares must not be empty")
    rows = []
    for share, sched in zip(llsa_shares, ablation_schedules(total_steps, llsa_shares)):
        rep = train(task, stack, sched, optim, seed=seed, n_eval=n_eval, eval_modes=("llsa",))
        rows.append(
            dict(schedule=rep.schedule, seed=seed, step=total_steps, mode="eval_llsa",
                 loss=rep.eval_final["llsa"], llsa_share=share)
        )
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schedule", "seed", "step", "mode", "loss"])
    for r in rows:
        w.writerow([r["schedule"], r["seed"], r["step"], r["mode"], repr(r["loss"])])
    return buf.getvalue()
