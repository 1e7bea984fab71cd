import io
import csv

import numpy as np
import pytest

from streamattn.block import ConfigError
from streamattn.experiments import (
    Dataset,
    OptimizerConfig,
    StackSpec,
    SyntheticTask,
    ToyModel,
    TrainingError,
    ablation_schedules,
    evaluate,
    gen_synthetic_task,
    loss_and_grads,
    masked_mse,
    parse_schedule,
    rows_to_csv,
    schedule_ablation,
    span_mask,
    split,
    train,
)
from streamattn.frames import BandSpec
from streamattn.numerics import Rng, finite_difference_grad

SMALL = SyntheticTask(n_sequences=24, n_frames=16)


def test_same_seed_same_dataset():
    a, b = gen_synthetic_task(SMALL), gen_synthetic_task(SMALL)
    for x, y in zip((a.inputs, a.targets, a.mask, a.bins), (b.inputs, b.targets, b.mask, b.bins)):
        assert np.array_equal(x, y)
    c = gen_synthetic_task(SyntheticTask(seed=1, n_sequences=24, n_frames=16))
    assert not np.array_equal(a.inputs, c.inputs)


def test_no_masking_means_zero_loss():
    data = gen_synthetic_task(SyntheticTask(n_sequences=4, mask_prob=0.0))
    assert not data.mask.any()
    model = ToyModel.init(8, 8, 2, 1, BandSpec(1, 1), 0)
    assert masked_mse(model.predict(data, "sa"), data) == 0.0
    loss, grads = loss_and_grads(model, data, "sa")
    assert loss == 0.0 and all(not g.any() for g in grads)


def test_sequences_contain_seeded_frequencies():
    task = SyntheticTask(n_sequences=12, n_frames=32, max_bin=6)
    data = gen_synthetic_task(task)
    for x, bins in zip(data.inputs, data.bins):
        spectrum = np.abs(np.fft.rfft(x, axis=0)).sum(axis=1)
        seeded = set(int(b) for b in bins)
        top = set(np.argsort(spectrum)[::-1][: len(seeded)].tolist())
        assert top == seeded


def test_span_mask_stays_in_bounds():
    rng = Rng(0)
    for n in (1, 3, 10, 40):
        for span in (1, 4, 50):
            m = span_mask(rng, n, 0.3, span)
            assert m.shape == (n,)
    assert span_mask(Rng(1), 10, 1.0, 4).all()
    assert not span_mask(Rng(1), 10, 0.0, 4).any()


def test_split_sizes():
    data = gen_synthetic_task(SMALL)
    tr, ev = split(data, 4)
    assert len(tr) == 20 and len(ev) == 4
    with pytest.raises(ValueError):
        split(data, 24)


@pytest.mark.parametrize("kind", ["sa", "llsa", "aa"])
def test_toy_model_gradients(kind):
    data = gen_synthetic_task(SyntheticTask(n_sequences=3, n_frames=8, dim=3, mask_prob=0.3, mask_span=2))
    model = ToyModel.init(3, 4, 2, 2, BandSpec(1, 1), 0)
    model.mask_emb[...] = Rng(2).normal(3)
    loss, grads = loss_and_grads(model, data, kind)
    for p, g in list(zip(model.params(), grads))[:7]:

        def f(z, p=p):
            saved = p.copy()
            p[...] = z.reshape(p.shape)
            try:
                return masked_mse(model.predict(data, kind), data)
            finally:
                p[...] = saved

        np.testing.assert_allclose(g.ravel(), finite_difference_grad(f, p), atol=1e-7)


def test_untrained_single_layer_modes_coincide():
    data = gen_synthetic_task(SMALL)
    model = ToyModel.init(8, 8, 2, 1, BandSpec(2, 2), 3)
    assert evaluate(model, data, "sa") == pytest.approx(evaluate(model, data, "llsa"), abs=1e-12)


def test_evaluate_errors():
    data = gen_synthetic_task(SMALL)
    model = ToyModel.init(8, 8, 2, 1, BandSpec(2, 2), 3)
    with pytest.raises(ValueError):
        evaluate(model, data.subset(slice(0, 0)), "sa")
    with pytest.raises(ConfigError):
        evaluate(model, data, "causal")


def test_schedule_validation():
    with pytest.raises(ValueError):
        train(SMALL, StackSpec(), [("sa", 0)])
    with pytest.raises(ValueError):
        train(SMALL, StackSpec(), [])
    with pytest.raises(ConfigError):
        train(SMALL, StackSpec(), [("dense", 3)])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    with pytest.raises(TrainingError) as info:
        train(SMALL, StackSpec(n_layers=1), [("sa", 5)], OptimizerConfig(lr=np.inf), n_eval=4)
    assert info.value.step == 1


def test_parse_schedule():
    assert parse_schedule("sa:150,llsa:50") == [("sa", 150), ("llsa", 50)]
    assert parse_schedule("SA:3 + llsa:1") == [("sa", 3), ("llsa", 1)]


def test_ablation_schedules_split_fixed_budget():
    assert ablation_schedules(200, (0, 0.25, 1)) == [[("sa", 200)], [("sa", 150), ("llsa", 50)], [("llsa", 200)]]


def test_training_is_deterministic_and_reports_every_step():
    stack = StackSpec(model_dim=8, n_layers=1)
    a = train(SMALL, stack, [("sa", 3), ("llsa", 2)], seed=4, n_eval=4)
    b = train(SMALL, stack, [("sa", 3), ("llsa", 2)], seed=4, n_eval=4)
    assert a.to_csv() == b.to_csv()
    rows = list(csv.reader(io.StringIO(a.to_csv())))
    assert rows[0] == ["schedule", "seed", "step", "mode", "loss"]
    assert [r[3] for r in rows[1:]] == ["sa"] * 3 + ["llsa"] * 2
    assert all(np.isfinite(float(r[4])) for r in rows[1:])


def test_single_point_ablation_is_one_deterministic_row():
    stack = StackSpec(model_dim=8, n_layers=1)
    rows = schedule_ablation(SMALL, stack, llsa_shares=(0.5,), total_steps=4, n_eval=4)
    assert len(rows) == 1 and rows == schedule_ablation(SMALL, stack, llsa_shares=(0.5,), total_steps=4, n_eval=4)
    assert rows_to_csv(rows).splitlines()[1].startswith("sa:2+llsa:2,0,4,eval_llsa,")
    with pytest.raises(ValueError):
        schedule_ablation(SMALL, stack, llsa_shares=())


@pytest.fixture(scope="module")
def trained():
    """Default toy stack trained three ways on seeds 0..2."""
    out = {}
    for seed in range(3):
        task = SyntheticTask(seed=seed)
        for name, sched in (("sa", [("sa", 200)]), ("sa_llsa", [("sa", 150), ("llsa", 50)]), ("llsa", [("llsa", 200)])):
            out[name, seed] = train(task, StackSpec(), sched, seed=seed)
    return out


@pytest.mark.slow
def test_training_reduces_loss_at_least_twofold(trained):
    for seed in range(3):
        rep = trained["sa", seed]
        assert rep.eval_final["sa"] * 2 <= rep.eval_init["sa"]


@pytest.mark.slow
def test_llsa_finetune_beats_sa_only_under_llsa_inference(trained):
    wins = sum(trained["sa_llsa", s].eval_final["llsa"] < trained["sa", s].eval_final["llsa"] for s in range(3))
    assert wins >= 2


@pytest.mark.slow
def test_sa_trained_model_prefers_sa_inference(trained):
    wins = sum(trained["sa", s].eval_final["sa"] <= trained["sa", s].eval_final["llsa"] for s in range(3))
    assert wins >= 2
    wins = sum(trained["sa", s].eval_final["sa"] <= trained["llsa", s].eval_final["sa"] for s in range(3))
    assert wins >= 2


@pytest.mark.slow
def test_matched_training_wins_under_llsa_inference_on_median(trained):
    med = {k: np.median([trained[k, s].eval_final["llsa"] for s in range(3)]) for k in ("sa", "llsa")}
    assert med["llsa"] <= med["sa"]
