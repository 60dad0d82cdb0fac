import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multimodn.data import Dataset, DatasetManifest, ModalitySpec, SynthModality, SynthSpec, SynthTask, TaskSpec, generate_synthetic, minmax_normalize
from multimodn.errors import ConfigError, ContractError, NumericError
from multimodn.model import ArchSpec, init_model, predict_dataset, serialize_model
from multimodn.numerics import DropoutPlan, finite_diff_grad, max_relative_error
from conftest import make_holey_ds
from multimodn.training import (
    TrainingConfig,
    compute_batch_grads,
    compute_sample_loss,
    evaluate,
    fit,
)


def _model(ds, state=6, hidden=5, seed=0):
    return init_model(ArchSpec.from_manifest(ds.manifest, state, hidden), seed=seed)


def _constant_decoders(model, biases):
    for dec in model.decoders:
        dec.layers[-1].weights[:] = 0
        dec.layers[-1].bias[:] = biases[dec.task.name]


def _bce(p, y):
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def test_half_prediction_gives_ln2():
    man = DatasetManifest([ModalitySpec("m", 3)], [TaskSpec("y")])
    ds = Dataset(man, {"m": np.ones((1, 1, 3))}, {"y": np.array([1.0])}, ["s"])
    model = _model(ds)
    _constant_decoders(model, {"y": 0.0})
    total, entries = compute_sample_loss(model, ds.sample(0), include_step0=False)
    assert len(entries) == 1
    assert total == pytest.approx(math.log(2), abs=1e-15)


def test_exact_regression_contributes_zero():
    man = DatasetManifest([ModalitySpec("m", 2)], [TaskSpec("r", "regression")])
    ds = Dataset(man, {"m": np.ones((1, 1, 2))}, {"r": np.array([0.37])}, ["s"])
    model = _model(ds)
    _constant_decoders(model, {"r": 0.37})
    total, entries = compute_sample_loss(model, ds.sample(0))
    assert [e.value for e in entries] == [0.0, 0.0] and total == 0.0


def test_two_tasks_three_states_hand_average(small_ds):
    model = _model(small_ds)
    _constant_decoders(model, {"a": 0.4, "r": -0.2})
    sample = small_ds.sample(5)
    sample.data[0]["m3"] = None  # prior + two encoded states
    total, entries = compute_sample_loss(model, sample)
    y, r = float(sample.targets["a"]), float(sample.targets["r"])
    p = 1 / (1 + math.exp(-0.4))
    hand = (3 * _bce(p, y) + 3 * (-0.2 - r) ** 2) / 6
    assert len(entries) == 6
    assert total == pytest.approx(hand, abs=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 119), st.booleans(), st.sampled_from(["all", "final"]), st.integers(0, 5))
def test_loss_is_mean_of_entries(i, step0, supervision, seed):
    ds = make_holey_ds()
    model = _model(ds, seed=seed)
    try:
        total, entries = compute_sample_loss(model, ds.sample(i), include_step0=step0, supervision=supervision)
    except ContractError:
        return  # every modality missing and step 0 excluded
    assert total == float(np.mean([e.value for e in entries]))


def test_no_valid_pair_is_contract_error():
    man = DatasetManifest([ModalitySpec("m", 2)], [TaskSpec("y")])
    ds = Dataset(man, {"m": np.full((1, 1, 2), np.nan)}, {"y": np.array([1.0])}, ["s"])
    with pytest.raises(ContractError):
        compute_sample_loss(_model(ds), ds.sample(0), include_step0=False)
    ds = Dataset(man, {"m": np.ones((1, 1, 2))}, {"y": np.array([np.nan])}, ["s"])
    with pytest.raises(ContractError):
        compute_sample_loss(_model(ds), ds.sample(0))


def test_batch_loss_is_mean_of_sample_losses(holey_ds):
    model = _model(holey_ds, seed=2)
    batch = holey_ds.subset(np.arange(25))
    loss, _ = compute_batch_grads(model, batch)
    singles = [compute_sample_loss(model, batch.sample(i))[0] for i in range(25)]
    assert loss == pytest.approx(np.mean(singles), abs=1e-13)


def test_duplicated_sample_gives_same_gradients(small_ds):
    model = _model(small_ds, seed=1)
    l1, g1 = compute_batch_grads(model, small_ds.subset([7]))
    l4, g4 = compute_batch_grads(model, small_ds.subset([7, 7, 7, 7]))
    assert l1 == pytest.approx(l4, abs=1e-14)
    assert all(np.allclose(g1[k], g4[k], atol=1e-14) for k in g1)


def test_all_missing_batch_trains_only_prior_and_decoders(small_ds):
    ds = small_ds.copy()
    for name in ds.manifest.modality_names:
        ds.features[name][:] = np.nan
    model = _model(ds)
    _, grads = compute_batch_grads(model, ds.subset(np.arange(10)), include_step0=True)
    for k, g in grads.items():
        if k.startswith("encoder."):
            assert not g.any(), k
    assert grads["state0"].any()
    assert any(g.any() for k, g in grads.items() if k.startswith("decoder."))


def test_skipped_encoder_gets_zero_gradient(small_ds):
    ds = small_ds.copy()
    ds.features["m2"][:] = np.nan
    _, grads = compute_batch_grads(_model(ds), ds.subset(np.arange(10)))
    assert all(not g.any() for k, g in grads.items() if k.startswith("encoder.m2."))
    assert any(g.any() for k, g in grads.items() if k.startswith("encoder.m1."))


def _time_series(n=12, seed=0):
    spec = SynthSpec(
        n_samples=n,
        timesteps=2,
        modalities=(SynthModality("m1", 4), SynthModality("m2", 3)),
        tasks=(SynthTask("y"), SynthTask("r", "regression", per_timestep=True)),
        seed=seed,
    )
    ds, _ = minmax_normalize(generate_synthetic(spec))
    rng = np.random.default_rng(seed)
    ds.features["m2"][rng.random(n) < 0.3, 0] = np.nan
    return ds


@pytest.mark.parametrize("step0, supervision", [(True, "all"), (False, "all"), (True, "final")])
def test_gradients_through_time_match_finite_differences(step0, supervision):
    ds = _time_series()
    model = _model(ds, state=5, hidden=6, seed=4)

    def run():
        return compute_batch_grads(model, ds, include_step0=step0, supervision=supervision)

    _, g = run()
    num = finite_diff_grad(lambda: run()[0], model.parameters())
    assert max_relative_error(g, num) < 1e-4


def _jitter_biases(model, seed=0):
    # zero biases put a fully dropped hidden vector exactly on the next relu kink
    rng = np.random.default_rng(seed)
    for name, value in model.parameters().items():
        if name.endswith("bias"):
            value[:] = rng.normal(scale=0.1, size=value.shape)


def test_gradients_with_dropout_and_random_order_match():
    ds = _time_series(seed=1)
    model = _model(ds, state=5, hidden=6, seed=5)
    _jitter_biases(model)
    def run():
        # a fresh plan per call replays the same dropout masks
        return compute_batch_grads(model, ds, DropoutPlan(0.2, "train", seed=3), order_rng=np.random.default_rng(8))

    _, g = run()
    num = finite_diff_grad(lambda: run()[0], model.parameters())
    assert max_relative_error(g, num) < 1e-4


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainingConfig(best_model_metric=("a", "f1"))
    with pytest.raises(ConfigError, match="bogus"):
        TrainingConfig.from_dict({"bogus": 1})
    cfg = TrainingConfig(epochs=3, best_model_metric=("a", "bac"))
    assert TrainingConfig.from_dict(cfg.to_dict()) == cfg


def _split(ds):
    return ds.subset(np.arange(80)), ds.subset(np.arange(80, 120))


def test_zero_learning_rate_changes_nothing(small_ds):
    train, val = _split(small_ds)
    model = _model(small_ds)
    before = serialize_model(model)
    report = fit(model, train, val, TrainingConfig(epochs=3, learning_rate=0.0, batch_size=16))
    assert serialize_model(model) == before
    assert len(set(report.curve("a", "auroc"))) == 1
    assert len({e.val_loss for e in report.epochs}) == 1


def test_fit_is_deterministic(small_ds):
    train, val = _split(small_ds)
    cfg = TrainingConfig(epochs=4, batch_size=16, seed=3, randomize_encoder_order=True)
    a, b = _model(small_ds), _model(small_ds)
    ra, rb = fit(a, train, val, cfg), fit(b, train, val, cfg)
    assert ra == rb
    assert ra.to_json(include_timing=False) == rb.to_json(include_timing=False)
    assert serialize_model(a) == serialize_model(b)


def test_checkpoint_holds_best_epoch(small_ds):
    train, val = _split(small_ds)
    for metric in (("a", "auroc"), ("r", "mse")):
        model = _model(small_ds, seed=6)
        report = fit(model, train, val, TrainingConfig(epochs=8, batch_size=16, best_model_metric=metric))
        curve = report.curve(*metric)
        best = max(curve) if metric[1] == "auroc" else min(curve)
        assert report.best_value == best and curve[report.best_epoch] == best
        assert len(report.epochs) == 8 and 0 <= report.best_epoch < 8
        assert evaluate(model, val).get(*metric).estimate == best


def test_fit_reports_and_csvs(small_ds):
    train, val = _split(small_ds)
    report = fit(_model(small_ds), train, val, TrainingConfig(epochs=2, batch_size=32))
    lines = report.epoch_csv().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,a_auroc,a_bac,r_mse"
    assert len(lines) == 3
    states = report.state_csv().splitlines()
    assert states[0] == "epoch,state_index,a,r"
    assert len(states) == 1 + 2 * 4  # prior plus three encoders per epoch


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_names_the_batch(small_ds):
    train, val = _split(small_ds)
    model = _model(small_ds)
    model.decoders[0].layers[-1].bias[:] = np.nan
    with pytest.raises(NumericError, match="epoch 0 batch 0"):
        fit(model, train, val, TrainingConfig(epochs=1))


def test_fit_rejects_overlap(small_ds):
    with pytest.raises(ContractError):
        fit(_model(small_ds), small_ds.subset(np.arange(50)), small_ds.subset(np.arange(40, 60)), TrainingConfig(epochs=1))


def test_evaluate_degenerate_predictors(small_ds):
    model = _model(small_ds)
    _constant_decoders(model, {"a": 0.3, "r": 0.0})
    rep = evaluate(model, small_ds)
    assert rep.get("a", "auroc").estimate == 0.5
    assert rep.get("a", "bac").estimate == 0.5
    one_class = small_ds.subset(np.flatnonzero(small_ds.targets["a"] == 1))
    assert evaluate(model, one_class).get("a", "auroc") is None


def test_evaluate_perfect_predictor():
    man = DatasetManifest([ModalitySpec("m", 1)], [TaskSpec("y")])
    y = np.array([0.0, 1.0, 0.0, 1.0])
    ds = Dataset(man, {"m": y.reshape(4, 1, 1)}, {"y": y}, list("abcd"))
    model = _model(ds, state=1, hidden=1)
    enc = model.encoders[0]
    for layer in enc.layers:
        layer.weights[:] = 0
        layer.bias[:] = 0
        layer.weights[0, -1] = 1.0 if layer is enc.layers[0] else 0.0
    for layer in enc.layers[1:]:
        layer.weights[0, 0] = 1.0
    dec = model.decoders[0]
    for layer in dec.layers:
        layer.weights[:] = 0
        layer.bias[:] = 0
        layer.weights[0, 0] = 1.0
    dec.layers[-1].weights[0, 0] = 10.0
    dec.layers[-1].bias[:] = -5.0
    rep = evaluate(model, ds)
    assert rep.get("y", "auroc").estimate == 1.0 and rep.get("y", "bac").estimate == 1.0
    assert predict_dataset(model, ds).final["y"].shape == (4, 1)
