from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from savae.autodiff import Tape
from savae.data import SyntheticSpec, gen_synthetic
from savae.errors import ConfigError, DataError, TrainingError
from savae.evaluation import PrepConfig, preprocess
from savae.losses import LossWeights
from savae.networks import discriminate, infer_codes, init_params
from savae.training import (
    AdamState,
    PlateauSchedule,
    StepSettings,
    TrainConfig,
    _bind_group,
    adam_step,
    calibrate_age_head,
    fit,
    generator_objective,
    init_optim,
    kfold_split,
    make_batch,
    train_step,
    train_step_multimodal,
    train_step_unimodal,
)

SMALL = dict(shared_dim=6, dist_dim=6, enc_hidden=(32,), dec_hidden=(32,), disc_hidden=(16,),
             reg_hidden=(16,), sex_hidden=(8,))


def prepared(n=400, seed=0, **spec):
    ds, _ = gen_synthetic(SyntheticSpec(n=n, seed=seed, **spec))
    train, _, _, _ = preprocess(ds, ds.subset(np.arange(2)), PrepConfig())
    return train


@pytest.fixture(scope="module")
def small_data():
    ds, _ = gen_synthetic(SyntheticSpec(n=300, d1=40, d2=40, seed=1))
    train, _, _, _ = preprocess(ds, ds.subset(np.arange(2)), PrepConfig(n_features=16))
    return train


def fresh(data, seed=0, **cfg):
    config = TrainConfig(**{**SMALL, **cfg})
    bundle = init_params(config.architecture(data.m1, None if config.mode == "unimodal" else data.m2), seed)
    calibrate_age_head(bundle, data.age)
    return bundle, init_optim(bundle), config


# Adam ----------------------------------------------------------------------


def test_adam_first_step():
    p = {"w": np.array([[0.5]])}
    adam_step(p, {"w": np.array([[1.0]])}, AdamState.zeros_like(p), lr=1e-3)
    assert p["w"][0, 0] == pytest.approx(0.5 - 1e-3, abs=1e-9)


def test_adam_zero_gradient_leaves_params():
    p = {"net.W0": np.ones((2, 2)), "net.b0": np.ones((1, 2))}
    g = {k: np.zeros_like(v) for k, v in p.items()}
    adam_step(p, g, AdamState.zeros_like(p), lr=1e-2)
    np.testing.assert_array_equal(p["net.W0"], 1.0)
    # decoupled decay shrinks weights by lr * wd and leaves biases alone
    adam_step(p, g, AdamState.zeros_like(p), lr=1e-2, weight_decay=0.5)
    np.testing.assert_allclose(p["net.W0"], 1 - 1e-2 * 0.5)
    np.testing.assert_array_equal(p["net.b0"], 1.0)


def test_adam_minimizes_quadratic():
    p = {"w": np.ones((1, 5))}
    state = AdamState.zeros_like(p)
    for _ in range(500):
        adam_step(p, {"w": 2 * p["w"]}, state, lr=1e-2)
    assert np.linalg.norm(p["w"]) < 1e-2


def test_adam_rejects_bad_input():
    p = {"w": np.ones((1, 2))}
    with pytest.raises(TrainingError):
        adam_step(p, {"w": np.array([[np.nan, 0.0]])}, AdamState.zeros_like(p), lr=1e-3)
    with pytest.raises(ConfigError):
        adam_step(p, {"w": np.ones((1, 2))}, AdamState.zeros_like(p), lr=0.0)
    with pytest.raises(ConfigError):
        adam_step(p, {"w": np.ones((2, 1))}, AdamState.zeros_like(p), lr=1e-3)


# single steps --------------------------------------------------------------


def test_zero_extra_weights_leave_plain_autoencoder_objective(small_data):
    bundle, _, cfg = fresh(small_data)
    w = LossWeights(mu1=0.0, mu2=0.0, mu5=0.0, mu3=0.7, mu4=1.3)
    batch = make_batch(small_data, np.arange(8))
    tape = Tape()
    bound = _bind_group(bundle, tape, set())
    total, parts = generator_objective(bundle, bound, batch, StepSettings(w), np.random.default_rng(0))
    assert total.item() == pytest.approx(0.7 * parts["rec"].item() + 1.3 * parts["reg"].item(), rel=1e-12)


def test_step_updates_the_right_parameters(small_data):
    batch = make_batch(small_data, np.arange(10))
    for variant, disc_moves in (("AE", False), ("SA-AVAE", True)):
        bundle, opt, _ = fresh(small_data, variant=variant)
        before = {k: v.copy() for k, v in bundle.parameters().items()}
        train_step(batch, bundle, StepSettings(), opt, np.random.default_rng(0))
        after = bundle.parameters()
        for name in before:
            moved = not np.array_equal(before[name], after[name])
            if name.startswith("disc."):
                assert moved == disc_moves, name
            elif name.startswith(("enc", "dec", "reg")):
                assert moved, name


def test_unimodal_step_without_modality2(small_data):
    bundle, opt, _ = fresh(small_data, mode="unimodal")
    assert bundle.enc2 is None
    batch = make_batch(small_data, np.arange(10), multimodal=False)
    assert batch.x2 is None
    out = train_step_unimodal(batch, bundle, StepSettings(), opt, np.random.default_rng(0))
    assert out.ratio == 0.0 and np.isfinite(out.total)
    with pytest.raises(ConfigError):
        train_step_multimodal(batch, bundle, StepSettings(), opt, np.random.default_rng(0))


def test_multimodal_step_needs_modality2(small_data):
    bundle, opt, _ = fresh(small_data)
    with pytest.raises(DataError):
        train_step(make_batch(small_data, np.arange(4), multimodal=False), bundle, StepSettings(), opt,
                   np.random.default_rng(0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises(small_data):
    bundle, opt, _ = fresh(small_data)
    bundle.reg.weights[-1][...] = np.inf
    with pytest.raises(TrainingError):
        train_step(make_batch(small_data, np.arange(4)), bundle, StepSettings(), opt, np.random.default_rng(0))


def test_overfit_one_batch():
    data = prepared()
    batch = make_batch(data, np.arange(20))
    for seed in range(3):
        bundle = calibrate_age_head(init_params(TrainConfig().architecture(data.m1, data.m2), seed), data.age)
        opt, rng = init_optim(bundle), np.random.default_rng(seed)
        first = train_step(batch, bundle, StepSettings(), opt, rng).reg
        for _ in range(299):
            last = train_step(batch, bundle, StepSettings(), opt, rng).reg
        assert last < 0.1 * first


def test_reconstruction_falls_by_half():
    # noise std 0.1 keeps the irreducible part of the reconstruction error well below half
    data = prepared(noise_std=0.1)
    for seed in range(3):
        bundle = calibrate_age_head(init_params(TrainConfig().architecture(data.m1, data.m2), seed), data.age)
        opt, rng = init_optim(bundle), np.random.default_rng(seed)
        recs = []
        for _ in range(200):
            idx = rng.choice(data.n, 20, replace=False)
            recs.append(train_step(make_batch(data, idx), bundle, StepSettings(dropout=0.1), opt, rng).rec)
        assert np.mean(recs[-10:]) <= 0.5 * recs[0]


def test_discriminator_stays_uncertain():
    data = prepared()
    for seed in range(3):
        bundle = calibrate_age_head(init_params(TrainConfig().architecture(data.m1, data.m2), seed), data.age)
        opt, rng = init_optim(bundle), np.random.default_rng(seed)
        for _ in range(200):
            idx = rng.choice(data.n, 20, replace=False)
            train_step(make_batch(data, idx), bundle, StepSettings(dropout=0.1), opt, rng)
        codes = infer_codes(bundle, data.x1, data.x2)
        fake = np.r_[codes.shared1, codes.shared2]
        real = rng.standard_normal(fake.shape)
        tape = Tape()
        acc = (np.mean(discriminate(bundle.disc, tape.constant(real)).value > 0.5)
               + np.mean(discriminate(bundle.disc, tape.constant(fake)).value < 0.5)) / 2
        assert 0.4 < acc < 0.95


# scheduling ----------------------------------------------------------------


def test_schedule_reduces_then_stops():
    s = PlateauSchedule(1e-3)
    events = [s.step(m) for m in [5.0] + [6.0] * 18]
    assert events[0] == (True, False, False)
    reductions = [i for i, e in enumerate(events) if e[1]]
    assert reductions == [9]
    assert events[18] == (False, False, True)
    assert s.lr == pytest.approx(2.5e-4)


def test_schedule_stop_wins_over_reduction():
    s = PlateauSchedule(1.0, patience=2, stop_patience=4)
    events = [s.step(m) for m in [1, 2, 2, 2, 2]]
    assert [e[1] for e in events] == [False, False, True, False, False]
    assert events[-1][2]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=60))
def test_schedule_lr_only_shrinks(trace):
    s = PlateauSchedule(1.0)
    lrs = []
    for m in trace:
        s.step(m)
        lrs.append(s.lr)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert s.best == min(trace)


# fit -----------------------------------------------------------------------


def test_zero_epochs_returns_initial_bundle(small_data):
    cfg = TrainConfig(max_epochs=0, **SMALL)
    bundle, history = fit(small_data, cfg)
    assert history.epochs == []
    init = init_params(cfg.architecture(small_data.m1, small_data.m2), cfg.seed).parameters()
    got = bundle.parameters()
    assert init.keys() == got.keys()
    for name in init:
        np.testing.assert_array_equal(got[name], init[name])


def test_fit_is_deterministic(small_data):
    cfg = TrainConfig(max_epochs=3, **SMALL)
    (a, ha), (b, hb) = fit(small_data, cfg), fit(small_data, cfg)
    assert ha.to_jsonl() == hb.to_jsonl()
    assert a.digest() == b.digest()


def test_fit_beats_mean_predictor(small_data):
    bundle, history = fit(small_data, TrainConfig(max_epochs=15, **SMALL))
    assert min(history.val_mae) < np.mean(np.abs(small_data.age - small_data.age.mean()))
    assert history.epochs[history.best_epoch].val_mae == min(history.val_mae)


def test_fit_restores_best_epoch(small_data):
    trace = [3.0, 2.0, 2.5, 2.6, 2.7]
    cfg = TrainConfig(max_epochs=5, **SMALL)
    best, history = fit(small_data, cfg, validation_metric=lambda e, b: trace[e])
    assert history.best_epoch == 1
    assert best.digest() == history.epochs[1].digest
    last, _ = fit(small_data, replace(cfg, restore_best=False), validation_metric=lambda e, b: trace[e])
    assert last.digest() == history.epochs[-1].digest


def test_fit_input_checks(small_data):
    with pytest.raises(DataError):
        fit(small_data.subset(np.arange(12)), TrainConfig(max_epochs=1, batch_size=20, **SMALL))
    with pytest.raises(DataError):
        fit(small_data.unimodal(), TrainConfig(max_epochs=1, **SMALL))
    with pytest.raises(ConfigError):
        fit(small_data, TrainConfig(variant="GAN"))
    with pytest.raises(ConfigError):
        fit(small_data, TrainConfig(lr=-1.0))


def test_config_round_trip():
    cfg = TrainConfig(variant="AVAE", weights=LossWeights(mu5=2.0), reg_hidden=(8, 4))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})


# folds ---------------------------------------------------------------------


def test_kfold_sizes():
    assert sorted(kfold_split(10, 10, 0).sizes()) == [1] * 10
    assert sorted(kfold_split(103, 10, 0).sizes()) == [10] * 7 + [11] * 3
    with pytest.raises(ConfigError):
        kfold_split(5, 6, 0)
    with pytest.raises(ConfigError):
        kfold_split(5, 1, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 300), st.integers(2, 20), st.integers(0, 10_000))
def test_kfold_partition(n, k, seed):
    if k > n:
        return
    folds = kfold_split(n, k, seed)
    union = np.concatenate([folds.test_indices(f) for f in range(k)])
    assert np.array_equal(np.sort(union), np.arange(n))
    assert max(folds.sizes()) - min(folds.sizes()) <= 1
    assert folds.digest() == kfold_split(n, k, seed).digest()
