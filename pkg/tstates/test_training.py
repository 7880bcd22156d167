#!/usr/bin/env python3
"""
Transformational States Training Tests
Losses, momentum SGD, plateau scheduling, checkpoints and the training loop
"""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tstates.config import resolve_config
from tstates.data import ProceduralStream, RecordBatches, generate_dataset
from tstates.errors import ConfigError, DomainError, FormatError, ShapeError, TrainingDiverged, UsageError
from tstates.metrics import ModelPredictor, evaluate_model
from tstates.model import build_model
from tstates.tensor_core import Tensor
from tstates.training import (
    Checkpoint,
    LossKind,
    OptimizerConfig,
    PlateauScheduler,
    Trainer,
    TrainingConfig,
    bce_loss,
    capture_state,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    mse_loss,
    plateau_scheduler_step,
    restore_state,
    save_checkpoint,
    sequence_loss,
    sgd_momentum_step,
    train,
)


def miniature(seed=0):
    config = resolve_config("miniature", seed=seed)
    model, _ = build_model(config.model)
    return model, config


def miniature_source(config):
    m = config.model
    return ProceduralStream(config.data, config.training.batch_size, m.input_frames, m.predict_frames,
                            m.value_range, dtype=m.numpy_dtype).batch


# Losses

def test_bce_uniform_prediction_is_ln2_per_pixel():
    """Test p=0.5 on a 64×64 frame costs 4096·ln 2 nats"""
    target = (np.random.default_rng(0).random((1, 1, 64, 64)) > 0.5).astype(np.float64)
    loss, nats = bce_loss(Tensor(np.full((1, 1, 64, 64), 0.5)), target)
    assert abs(nats - 4096 * math.log(2)) <= 1e-9
    assert abs(loss.item() - math.log(2)) <= 1e-12


def test_bce_perfect_binary_prediction_is_near_zero():
    """Test the clamp bounds the cost of a perfect prediction"""
    target = (np.random.default_rng(1).random((2, 1, 16, 16)) > 0.5).astype(np.float64)
    _, nats = bce_loss(Tensor(target.copy()), target)
    assert 0.0 <= nats < 1e-3


def test_bce_matches_direct_formula():
    """Test against the per-pixel cross-entropy written out"""
    rng = np.random.default_rng(2)
    p = rng.uniform(0.01, 0.99, (3, 1, 8, 8))
    t = rng.random((3, 1, 8, 8))
    loss, nats = bce_loss(Tensor(p), t)
    per_pixel = -(t * np.log(p) + (1 - t) * np.log(1 - p))
    assert abs(loss.item() - per_pixel.mean()) <= 1e-10
    assert abs(nats - per_pixel.sum() / 3) <= 1e-10


def test_bce_rejects_targets_outside_unit_interval():
    """Test a target of 1.5 is a domain error"""
    with pytest.raises(DomainError):
        bce_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), np.full((1, 1, 2, 2), 1.5))
    with pytest.raises(ShapeError):
        bce_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), np.zeros((1, 1, 2, 3)))


def test_mse_loss():
    """Test zero for identical images and 0.25 for a 0.5 offset"""
    x = np.random.default_rng(3).random((2, 1, 4, 4))
    assert mse_loss(Tensor(x), x).item() == 0.0
    assert abs(mse_loss(Tensor(x + 0.5), x).item() - 0.25) <= 1e-12


def test_sequence_loss_averages_predicted_frames():
    """Test the loss covers the predicted frames only"""
    targets = np.zeros((2, 3, 1, 4, 4))
    predictions = [Tensor(np.full((2, 1, 4, 4), v)) for v in (0.0, 1.0, 2.0)]
    loss, report = sequence_loss(predictions, targets, LossKind.MSE)
    assert abs(loss.item() - 5.0 / 3.0) <= 1e-12
    assert abs(report - 5.0 / 3.0) <= 1e-12
    with pytest.raises(ShapeError):
        sequence_loss(predictions[:2], targets, LossKind.MSE)


# Optimizer

def scalar_param(value, decay=False):
    t = Tensor(np.array([value]), requires_grad=True)
    t.decay = decay
    return t


def test_momentum_two_step_trajectory():
    """Test θ1 = -0.1 and θ2 = -0.25 for unit gradients"""
    params = {"w": scalar_param(0.0)}
    config = OptimizerConfig(learning_rate=0.1, momentum=0.5, weight_decay=0.0)
    velocities = {}
    sgd_momentum_step(params, {"w": np.array([1.0])}, velocities, config)
    assert abs(params["w"].data[0] + 0.1) <= 1e-12
    sgd_momentum_step(params, {"w": np.array([1.0])}, velocities, config)
    assert abs(params["w"].data[0] + 0.25) <= 1e-12
    assert abs(velocities["w"][0] - 1.5) <= 1e-12


def test_zero_learning_rate_leaves_parameters_bitwise():
    """Test lr 0 keeps every bit, signed zeros included"""
    param = Tensor(np.array([-0.0, 1.5, -2.25]), requires_grad=True)
    param.decay = True
    before = param.data.tobytes()
    sgd_momentum_step({"w": param}, {"w": np.array([1.0, -1.0, 3.0])}, {}, OptimizerConfig(), learning_rate=0.0)
    assert param.data.tobytes() == before


def test_zero_gradient_zero_velocity_is_a_fixed_point():
    """Test nothing moves without gradient, velocity or decay"""
    param = scalar_param(3.0, decay=True)
    sgd_momentum_step({"w": param}, {"w": np.zeros(1)}, {}, OptimizerConfig(weight_decay=0.0))
    assert param.data[0] == 3.0


def test_weight_decay_applies_to_flagged_tensors_only():
    """Test decay shrinks flagged tensors and leaves the rest"""
    decayed = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    decayed.decay = True
    plain = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    config = OptimizerConfig(learning_rate=0.1, weight_decay=0.1)
    grads = {"a": np.zeros(2), "b": np.zeros(2)}
    sgd_momentum_step({"a": decayed, "b": plain}, grads, {}, config)
    assert np.linalg.norm(decayed.data) < np.linalg.norm([1.0, -2.0])
    np.testing.assert_array_equal(plain.data, [1.0, -2.0])


def test_gradient_shape_must_match():
    """Test a mis-shaped gradient is rejected"""
    with pytest.raises(ShapeError):
        sgd_momentum_step({"w": scalar_param(0.0)}, {"w": np.zeros(2)}, {}, OptimizerConfig())


# Scheduler

def test_scheduler_keeps_rate_while_improving():
    """Test strictly improving losses never decay the rate"""
    config = OptimizerConfig(learning_rate=1.0)
    assert plateau_scheduler_step([1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3], 1.0, config) == 1.0


def test_scheduler_decays_after_patience():
    """Test patience+1 flat evaluations divide the rate by the factor"""
    config = OptimizerConfig(learning_rate=1.0, plateau_patience=5, decay_factor=10.0)
    assert plateau_scheduler_step([1.0] * 5, 1.0, config) == 1.0
    assert abs(plateau_scheduler_step([1.0] * 6, 1.0, config) - 0.1) <= 1e-15
    assert abs(plateau_scheduler_step([1.0] * 11, 1.0, config) - 0.01) <= 1e-15


def test_scheduler_ignores_gains_below_threshold():
    """Test improvements smaller than the relative threshold count as a plateau"""
    config = OptimizerConfig(learning_rate=1.0, plateau_patience=5, min_relative_improvement=1e-3)
    history = [1.0 - 1e-4 * i for i in range(6)]
    assert abs(plateau_scheduler_step(history, 1.0, config) - 0.1) <= 1e-15


def test_scheduler_requires_history():
    """Test an empty history is a usage error"""
    with pytest.raises(UsageError):
        plateau_scheduler_step([], 1.0, OptimizerConfig())


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=40))
def test_scheduler_never_increases_rate(history):
    """Test the rate is non-increasing for any history"""
    config = OptimizerConfig(learning_rate=1.0)
    scheduler = PlateauScheduler(config)
    previous = scheduler.learning_rate
    for loss in history:
        scheduler.observe(loss)
        assert scheduler.learning_rate <= previous
        previous = scheduler.learning_rate


def test_scheduler_state_round_trip():
    """Test scheduler state survives state_dict/load_state"""
    config = OptimizerConfig()
    scheduler = PlateauScheduler(config)
    for loss in (1.0, 1.0, 1.0):
        scheduler.observe(loss)
    restored = PlateauScheduler(config)
    restored.load_state(json.loads(json.dumps(scheduler.state_dict())))
    assert restored.state_dict() == scheduler.state_dict()


def test_optimizer_config_validation():
    """Test out-of-range optimizer settings and unknown keys"""
    with pytest.raises(ConfigError):
        OptimizerConfig(momentum=1.0).validate()
    with pytest.raises(ConfigError):
        OptimizerConfig(decay_factor=1.0).validate()
    with pytest.raises(ConfigError):
        OptimizerConfig.from_dict({"beta": 0.9})
    with pytest.raises(ConfigError):
        TrainingConfig.from_dict({"loss": "hinge"})


# Checkpoints

def test_checkpoint_round_trip_is_byte_identical():
    """Test encode(decode(encode(c))) == encode(c)"""
    model, config = miniature()
    checkpoint = capture_state(model, {"encoder.0.kernel": np.ones((4, 1, 4, 4))}, {"config": config.to_dict()})
    raw = encode_checkpoint(checkpoint)
    again = decode_checkpoint(raw)
    assert encode_checkpoint(again) == raw
    assert again.metadata["config"]["preset"] == "miniature"
    assert again.tensors["param/encoder.0.kernel"].dtype == np.float64


def test_restored_model_predicts_identically(tmp_path):
    """Test a saved and reloaded model gives bitwise equal predictions"""
    model, config = miniature()
    path = save_checkpoint(capture_state(model, {}, {}), tmp_path / "model.tspr")
    other, _ = miniature(seed=9)
    restore_state(other, load_checkpoint(path))
    inputs = np.random.default_rng(4).uniform(-1, 1, (2, 3, 1, 8, 8))
    np.testing.assert_array_equal(model.rollout(inputs, 3), other.rollout(inputs, 3))


def test_corrupt_checkpoints_are_rejected(tmp_path):
    """Test bad magic and truncation name what failed"""
    model, _ = miniature()
    raw = encode_checkpoint(capture_state(model, {}, {}))
    with pytest.raises(FormatError) as info:
        decode_checkpoint(b"XXXX" + raw[4:])
    assert "TSPR" in str(info.value)
    with pytest.raises(FormatError) as info:
        decode_checkpoint(raw[:-3])
    assert info.value.field.endswith(".payload")
    with pytest.raises(FormatError) as info:
        decode_checkpoint(raw + b"\x00")
    assert info.value.field == "trailer"


def test_restore_rejects_a_different_architecture():
    """Test loading into a model with other dims fails cleanly"""
    model, _ = miniature()
    desk, _ = build_model(resolve_config("desk").model)
    with pytest.raises(FormatError):
        restore_state(desk, capture_state(model, {}, {}))


def test_checkpoint_rejects_unsupported_dtype():
    """Test only float32 and float64 tensors are stored"""
    with pytest.raises(UsageError):
        encode_checkpoint(Checkpoint(config_text="{}", tensors={"x": np.zeros(2, dtype=np.int32)}))


# Training loop

def test_zero_step_budget_writes_log_and_keeps_parameters(tmp_path):
    """Test budget 0 leaves parameters untouched but still logs and checkpoints"""
    model, config = miniature()
    before = {n: t.data.copy() for n, t in model.named_parameters().items()}
    training = TrainingConfig.from_dict({**config.training.to_dict(), "steps": 0})
    result = train(model, miniature_source(config), config.optimizer, training, tmp_path, echo=False)
    assert result.steps == 0
    assert (tmp_path / "train.log").exists()
    assert (tmp_path / "last.tspr").exists()
    events = [json.loads(line) for line in (tmp_path / "train.log").read_text().splitlines()]
    assert events[0]["type"] == "TRAIN_START"
    for name, t in model.named_parameters().items():
        np.testing.assert_array_equal(t.data, before[name])


def test_first_step_loss_is_reproducible(tmp_path):
    """Test two runs with the same seed report the same step-0 loss"""
    losses = []
    for run in range(2):
        model, config = miniature()
        trainer = Trainer(model, config.optimizer, config.training, tmp_path / str(run), echo=False)
        inputs, targets = miniature_source(config)(0)
        losses.append(trainer.train_step(inputs, targets))
        trainer.close()
    assert losses[0] == losses[1]
    assert math.isfinite(losses[0])


def test_prefetched_training_matches_inline(tmp_path):
    """Test background batch assembly does not change the trajectory"""
    finals = []
    for threads in (1, 2):
        model, config = miniature()
        trainer = Trainer(model, config.optimizer, config.training, tmp_path / str(threads),
                          threads=threads, echo=False)
        result = trainer.fit(miniature_source(config), 3)
        trainer.close()
        finals.append([loss for _, loss in result.losses])
    assert finals[0] == finals[1]


def test_validation_checkpoints_best_model(tmp_path):
    """Test validation events and best.tspr"""
    model, config = miniature()
    training = TrainingConfig.from_dict({**config.training.to_dict(), "validate_every": 2})
    source = miniature_source(config)
    validation = [source(100)]
    trainer = Trainer(model, config.optimizer, training, tmp_path, echo=False)
    result = trainer.fit(source, 4, validation)
    trainer.close()
    assert [step for step, _ in result.validations] == [2, 4]
    assert (tmp_path / "best.tspr").exists()
    types = {e["type"] for e in trainer.run_log.events}
    assert {"TRAIN_START", "TRAIN_STEP", "VALIDATION", "CHECKPOINT"} <= types


def test_resume_continues_step_and_velocities(tmp_path):
    """Test a resumed trainer picks up step count, velocities and scheduler"""
    model, config = miniature()
    trainer = Trainer(model, config.optimizer, config.training, tmp_path / "a", echo=False)
    trainer.fit(miniature_source(config), 2)
    trainer.close()

    other, _ = miniature()
    resumed = Trainer(other, config.optimizer, config.training, tmp_path / "b", echo=False)
    resumed.resume(load_checkpoint(tmp_path / "a" / "last.tspr"))
    resumed.close()
    assert resumed.step == 2
    assert set(resumed.velocities) == set(trainer.velocities)
    for name, t in model.named_parameters().items():
        np.testing.assert_array_equal(other.named_parameters()[name].data, t.data)


def test_non_finite_loss_dumps_state(tmp_path):
    """Test a NaN parameter stops training with a diagnostic dump"""
    model, config = miniature()
    model.named_parameters()["decoder.1.bias"].data[:] = np.nan
    trainer = Trainer(model, config.optimizer, config.training, tmp_path, echo=False)
    with pytest.raises(TrainingDiverged) as info:
        trainer.fit(miniature_source(config), 1)
    trainer.close()
    dump = json.loads((tmp_path / "diverged.json").read_text())
    assert info.value.dump_path == str(tmp_path / "diverged.json")
    assert dump["parameters"]["decoder.1.bias"]["finite"] is False


@pytest.mark.slow
def test_overfits_a_fixed_batch(tmp_path):
    """Test training drives the loss down on two fixed sequences"""
    model, config = miniature()
    m = config.model
    records = generate_dataset(config.data.for_split("train"), 2)
    source = RecordBatches(records, 2, m.input_frames, m.predict_frames, m.value_range,
                           seed=0, dtype=m.numpy_dtype).batch
    trainer = Trainer(model, config.optimizer, config.training, tmp_path, echo=False)
    result = trainer.fit(source, 150)
    trainer.close()
    losses = [loss for _, loss in result.losses]
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


@pytest.mark.slow
def test_desk_model_overfits_thirty_two_sequences(tmp_path):
    """Test 5000 steps on 32 fixed sequences bring BCE under 15% of the p=0.5 baseline"""
    config = resolve_config("desk", seed=0)
    model, _ = build_model(config.model)
    m = config.model
    records = generate_dataset(config.data.for_split("train"), 32)
    source = RecordBatches(records, config.training.batch_size, m.input_frames, m.predict_frames,
                           m.value_range, seed=0, dtype=m.numpy_dtype).batch
    trainer = Trainer(model, config.optimizer, config.training, tmp_path, echo=False)
    result = trainer.fit(source, 5000)
    trainer.close()
    assert all(math.isfinite(loss) for _, loss in result.losses)

    uniform = m.input_size * m.input_size * math.log(2)
    assert abs(uniform - 2839.3) <= 0.05
    report = evaluate_model(ModelPredictor(model), records, m.input_frames, m.predict_frames,
                            m.value_range, metrics=("bce",), dtype=m.numpy_dtype)
    assert report.average("bce") < 0.15 * uniform


def test_resume_into_same_directory_keeps_log(tmp_path):
    """Test a resumed run appends to train.log instead of truncating it"""
    model, config = miniature()
    trainer = Trainer(model, config.optimizer, config.training, tmp_path, echo=False)
    trainer.fit(miniature_source(config), 2)
    trainer.close()
    before = (tmp_path / "train.log").read_text().splitlines()

    other, _ = miniature()
    resumed = Trainer(other, config.optimizer, config.training, tmp_path, echo=False)
    resumed.resume(load_checkpoint(tmp_path / "last.tspr"))
    resumed.fit(miniature_source(config), 1)
    resumed.close()
    lines = (tmp_path / "train.log").read_text().splitlines()
    assert lines[:len(before)] == before
    types = [json.loads(line)["type"] for line in lines]
    assert types.count("TRAIN_START") == 2
    assert "RESUME" in types[len(before):]
