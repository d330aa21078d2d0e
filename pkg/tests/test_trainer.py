import math

import numpy as np
import pandas as pd
import pytest

from stcvit.data_pipeline import LatLonGrid, fit_input_normalization, generate_synthetic, make_windows
from stcvit.model import ModelConfig, build_variant, forward
from stcvit.physics import MissingChannelError
from stcvit.tensor import Tensor
from stcvit.trainer import (
    PERSISTENCE, AdamW, EarlyStopState, OptimizerState, ScheduleConfig, TrainConfig, TrainingDivergenceError,
    adamw_step, cosine_warmup_lr, evaluate, forecast, lead_steps, rollout, train,
)


@pytest.fixture
def sequence():
    return generate_synthetic(LatLonGrid.equiangular(4, 8), 16, seed=7)


@pytest.fixture
def stats(sequence):
    return fit_input_normalization(sequence)


def small_model(**overrides):
    values = dict(height=4, width=8, dim=8, heads=2, depth=1, seed=2)
    values.update(overrides)
    return build_variant(ModelConfig(**values))


def scalar_param(value=1.0):
    return {"w": Tensor(np.array([value]), requires_grad=True)}


# ---------------------------------------------------------------- optimizer


def test_adamw_zero_gradient_no_decay_is_noop():
    params = scalar_param(0.7)
    adamw_step(params, {"w": np.zeros(1)}, OptimizerState(weight_decay=0.0), 1e-3)
    assert params["w"].data[0] == 0.7


def test_adamw_first_step_hand_case():
    params = scalar_param(1.0)
    state = OptimizerState(weight_decay=0.0)
    assert adamw_step(params, {"w": np.ones(1)}, state, 1e-3)
    assert abs(params["w"].data[0] - (1.0 - 1e-3)) < 1e-9
    assert state.step == 1


def test_adamw_zero_lr_advances_moments():
    params = scalar_param(2.0)
    state = OptimizerState()
    adamw_step(params, {"w": np.full(1, 0.5)}, state, 0.0)
    assert params["w"].data[0] == 2.0
    assert state.step == 1
    assert state.m["w"][0] == pytest.approx(0.05)
    assert state.v["w"][0] == pytest.approx(0.00025)


def test_adamw_decay_is_decoupled():
    params = scalar_param(1.0)
    adamw_step(params, {"w": np.zeros(1)}, OptimizerState(weight_decay=0.1), 0.01)
    assert params["w"].data[0] == pytest.approx(1.0 - 0.01 * 0.1, abs=1e-12)


def test_adamw_skips_non_finite_gradient():
    params = scalar_param(1.0)
    state = OptimizerState()
    assert not adamw_step(params, {"w": np.array([np.nan])}, state, 1e-3)
    assert params["w"].data[0] == 1.0
    assert state.step == 0
    assert not state.m


def test_adamw_rejects_negative_lr():
    with pytest.raises(ValueError):
        adamw_step(scalar_param(), {"w": np.ones(1)}, OptimizerState(), -1e-3)


def test_adamw_wrapper_reads_grad():
    params = scalar_param(1.0)
    params["w"].grad = np.ones(1)
    opt = AdamW(params, weight_decay=0.0)
    opt.step(1e-3)
    opt.zero_grad()
    assert params["w"].grad is None
    assert opt.state.step == 1


# ---------------------------------------------------------------- schedule


@pytest.fixture
def schedule():
    return ScheduleConfig(total_epochs=20, steps_per_epoch=10, warmup_fraction=0.1, base_lr=5e-5)


def test_schedule_warmup_end_is_base_lr(schedule):
    assert schedule.warmup_steps == 20
    assert cosine_warmup_lr(20, schedule) == 5e-5


def test_schedule_ends_at_zero(schedule):
    assert abs(cosine_warmup_lr(200, schedule)) < 1e-12
    assert cosine_warmup_lr(0, schedule) == 0.0


def test_schedule_cosine_midpoint(schedule):
    assert cosine_warmup_lr(110, schedule) == pytest.approx(2.5e-5)


def test_schedule_is_continuous(schedule):
    lrs = np.array([cosine_warmup_lr(s, schedule) for s in range(201)])
    assert np.max(np.abs(np.diff(lrs))) <= 5e-5 / schedule.warmup_steps + 1e-15
    assert np.all(lrs >= 0)


@pytest.mark.parametrize("step", [-1, 201])
def test_schedule_rejects_out_of_range(schedule, step):
    with pytest.raises(ValueError):
        cosine_warmup_lr(step, schedule)


def test_schedule_rejects_bad_fraction():
    with pytest.raises(ValueError):
        ScheduleConfig(warmup_fraction=1.0)


def test_schedule_single_step_warmup():
    tiny = ScheduleConfig(total_epochs=1, steps_per_epoch=2, warmup_fraction=0.1)
    assert tiny.warmup_steps == 1
    assert cosine_warmup_lr(1, tiny) == tiny.base_lr


# ---------------------------------------------------------------- early stopping


def test_early_stop_after_exactly_tolerance_epochs():
    early = EarlyStopState(tolerance=10)
    losses = [1.0, 0.9] + [0.9, 0.95, 1.2] * 4
    stopped_at = None
    for epoch, loss in enumerate(losses, start=1):
        early.update(loss)
        if early.should_stop:
            stopped_at = epoch
            break
    assert stopped_at == 12
    assert early.best == 0.9


def test_early_stop_resets_on_strict_improvement():
    early = EarlyStopState(tolerance=3)
    for loss in (1.0, 1.0, 1.0):
        early.update(loss)
    assert early.epochs_since_improvement == 2
    assert early.update(0.5)
    assert early.epochs_since_improvement == 0


# ---------------------------------------------------------------- training


def windows(sequence):
    return make_windows(sequence[:6]), make_windows(sequence[6:10])


def test_one_epoch_step_count(sequence, stats):
    train_w, val_w = windows(sequence)
    assert len(train_w) == 4
    result = train(small_model(), train_w, val_w, stats, sequence.grid, TrainConfig(epochs=1, batch_size=2))
    assert result.optimizer_steps == 2
    assert list(result.epoch_log.columns) == [
        "epoch", "lr", "train_total", "train_lat_mse", "train_kinetic", "train_potential", "train_thermo", "val_total",
    ]
    assert len(result.epoch_log) == 1
    assert result.best_epoch == 1


def test_training_is_deterministic(sequence, stats):
    train_w, val_w = windows(sequence)
    config = TrainConfig(epochs=2, batch_size=3, base_lr=5e-4, seed=4)
    a = train(small_model(), train_w, val_w, stats, sequence.grid, config)
    b = train(small_model(), train_w, val_w, stats, sequence.grid, config)
    pd.testing.assert_frame_equal(a.epoch_log, b.epoch_log, check_exact=True)
    for name, value in a.best_state.items():
        np.testing.assert_array_equal(b.best_state[name], value)


def test_zero_learning_rate_keeps_parameters(sequence, stats):
    train_w, val_w = windows(sequence)
    model = small_model()
    before = model.state_dict()
    train(model, train_w, val_w, stats, sequence.grid, TrainConfig(epochs=2, batch_size=2, base_lr=0.0))
    for name, value in model.state_dict().items():
        np.testing.assert_array_equal(value, before[name])


def test_training_changes_parameters(sequence, stats):
    train_w, val_w = windows(sequence)
    model = small_model()
    before = model.state_dict()
    result = train(model, train_w, val_w, stats, sequence.grid, TrainConfig(epochs=3, batch_size=2, base_lr=1e-3))
    assert result.optimizer_steps == 6
    assert any(not np.array_equal(before[n], v) for n, v in result.best_state.items())
    assert all(math.isfinite(r["val_total"]) for r in result.breakdowns)


def test_early_stop_in_training_loop(sequence, stats):
    train_w, val_w = windows(sequence)
    result = train(small_model(), train_w, val_w, stats, sequence.grid,
                   TrainConfig(epochs=6, batch_size=4, base_lr=0.0, early_stop_tolerance=2))
    # with lr 0 the validation loss never strictly improves after the first epoch
    assert result.stopped_early
    assert len(result.epoch_log) == 3
    assert result.best_epoch == 1


def test_training_requires_bound_channels(sequence, stats):
    train_w, val_w = windows(sequence)
    model = small_model(variables=["t2m", "v10", "z500"])
    with pytest.raises(MissingChannelError):
        train(model, train_w, val_w, stats, sequence.grid, TrainConfig(epochs=1))


def test_training_divergence_is_reported(sequence, stats):
    train_w, val_w = windows(sequence)
    model = small_model(dtype="float64")
    model.blocks[0].fusion.proj.bias.data[:] = 1e308
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDivergenceError, match="Block 0"):
            train(model, train_w, val_w, stats, sequence.grid, TrainConfig(epochs=1))


def test_train_rejects_empty_splits(sequence, stats):
    train_w, val_w = windows(sequence)
    with pytest.raises(ValueError):
        train(small_model(), [], val_w, stats, sequence.grid, TrainConfig())
    with pytest.raises(ValueError):
        train(small_model(), train_w, [], stats, sequence.grid, TrainConfig())


@pytest.mark.slow
def test_training_halves_loss_on_rotation():
    seq = generate_synthetic(LatLonGrid.equiangular(8, 16), 60, seed=1)
    stats = fit_input_normalization(seq[:48])
    ratios = []
    for seed in (0, 1, 2):
        model = build_variant(ModelConfig(dim=32, heads=4, depth=1, seed=seed))
        result = train(model, make_windows(seq[:48]), make_windows(seq[48:]), stats, seq.grid,
                       TrainConfig(epochs=20, batch_size=4, base_lr=5e-4, seed=seed))
        log = result.epoch_log
        assert result.best_val_loss <= log["val_total"].iloc[0]
        ratios.append(log["train_total"].iloc[-1] / log["train_total"].iloc[0])
    assert np.median(ratios) <= 0.5, ratios


# ---------------------------------------------------------------- rollout, evaluate, forecast


def test_lead_steps():
    assert lead_steps(6, 6.0) == 1
    assert lead_steps(36, 6.0) == 6
    for bad in (9, 0, -6):
        with pytest.raises(ValueError):
            lead_steps(bad, 6.0)


def test_rollout_counts_and_shapes(sequence, stats):
    model = small_model()
    preds = rollout(model, stats, sequence[0].fields, sequence[1].fields, 6.0, 3)
    assert len(preds) == 3
    assert all(p.shape == (4, 4, 8) and p.dtype == np.float32 for p in preds)
    assert rollout(model, stats, sequence[0].fields, sequence[1].fields, 6.0, 0) == []


def test_evaluate_rows_per_lead(sequence, stats):
    report = evaluate(small_model(), sequence, stats, [6, 12, 18])
    frame = report.to_frame()
    assert len(frame) == 3 * 4 * 2
    model_rows = frame[frame.variant == "full"]
    assert sorted(model_rows.lead_hours.unique()) == [6.0, 12.0, 18.0]
    assert (model_rows.groupby("variable").size() == 3).all()


def test_persistence_is_imperfect_on_moving_data(sequence, stats):
    frame = evaluate(small_model(), sequence, stats, [6]).to_frame()
    persistence = frame[frame.variant == PERSISTENCE]
    assert len(persistence) == 4
    assert (persistence.rmse > 0).all()
    assert ((persistence.acc >= -1) & (persistence.acc <= 1)).all()


def test_evaluate_rejects_lead_mismatch(sequence, stats):
    with pytest.raises(ValueError):
        evaluate(small_model(), sequence, stats, [9])


def test_evaluate_rejects_short_sequence(sequence, stats):
    with pytest.raises(ValueError):
        evaluate(small_model(), sequence[:4], stats, [18])


def test_single_step_paths_agree(sequence, stats):
    model = small_model()
    window = make_windows(sequence[:3])[0]
    direct = stats.subset(sequence.var_names).invert(forward(window, model, stats)).astype(np.float32)
    out = forecast(model, sequence, stats, start=1, steps=1)
    np.testing.assert_array_equal(out[0].fields, direct)
    assert out[0].time == 2

    report = evaluate(model, sequence[:3], stats, [6], include_persistence=False)
    rmse = report.lookup("full", "t2m", 6).rmse
    diff = (direct[0] - sequence[2].fields[0]).astype(np.float64) ** 2
    w = np.cos(np.deg2rad(sequence.grid.lats))
    w = w / w.mean()
    assert rmse == pytest.approx(math.sqrt(np.mean(w[:, None] * diff)), rel=1e-5)


def test_forecast_empty_and_out_of_range(sequence, stats):
    model = small_model()
    assert len(forecast(model, sequence, stats, start=3, steps=0)) == 0
    with pytest.raises(ValueError):
        forecast(model, sequence, stats, start=0, steps=1)
    with pytest.raises(ValueError):
        forecast(model, sequence, stats, start=10, steps=6)
