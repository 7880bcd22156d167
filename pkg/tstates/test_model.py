#!/usr/bin/env python3
"""
Transformational States Model Tests
Parameter census, residual mixing, wiring and rollout stability
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tstates.config import resolve_config
from tstates.errors import ConfigError, ShapeError, UsageError
from tstates.model import (
    CoreMode,
    GateParams,
    LatentPair,
    ModelConfig,
    ResidualMode,
    build_model,
    convlstm_step,
    weighted_residual,
)
from tstates.tensor_core import Tape, Tensor, backward, mean, zeros, zeros_like


def preset_model(preset, ablation="none", **overrides):
    config = resolve_config(preset, ablation=ablation).model
    for key, value in overrides.items():
        setattr(config, key, value)
    return build_model(config)


def test_mnist_census_matches_hand_count():
    """Test every component of the full-size census"""
    _, census = preset_model("mnist-paper")
    k = 16
    encoder = (64 * 1 * k + 64) + (64 * 64 * k + 64 + 128) + (96 * 64 * k + 96 + 192) \
        + (96 * 96 * k + 96 + 192) + (128 * 96 * k + 128 + 256)
    core_rnn = (256 * 192 * 9 + 256) + 2 * (256 * 128 * 9 + 256)
    core_phi = (64 * 128 * k + 64) + 2 * (64 * 64 * k + 64)
    decoder = (64 * 96 * k + 96 + 192) + (96 * 96 * k + 96 + 192) + (96 * 64 * k + 64 + 128) \
        + (64 * 64 * k + 64 + 128) + (64 * 1 * k + 1)
    assert census.components["encoder"] == encoder
    assert census.components["core_rnn"] == core_rnn
    assert census.components["core_phi"] == core_phi
    assert census.components["decoder"] == decoder
    assert census.gate_counts == [97, 97, 65]
    assert census.components["residual_gates"] == 259
    assert census.components["residual_projections"] == 64 * 96 + 96
    assert census.components["image_gate"] == 0
    assert census.total == 2223524


def test_ablation_census_deltas():
    """Test each ablation removes exactly the parameters it disables"""
    _, full = preset_model("desk")
    _, skip = preset_model("desk", "skip-last-input")
    _, no_residual = preset_model("desk", "no-residual")
    _, no_core = preset_model("desk", "no-core")

    assert skip.to_dict() == full.to_dict()
    residual = full.components["residual_gates"] + full.components["residual_projections"] \
        + full.components["image_gate"]
    assert full.total - no_residual.total == residual
    assert no_residual.gate_counts == []
    assert full.total - no_core.total == full.components["core_phi"]
    assert no_core.components["core_phi"] == 0


def test_parameter_names_are_unique_and_initialized():
    """Test naming, forget-gate bias and weight-decay flags"""
    model, census = preset_model("desk")
    params = model.named_parameters()
    assert sum(t.size for t in params.values()) == census.total
    hidden = model.config.convlstm_hidden
    bias = params["core.lstm.0.bias"].data
    np.testing.assert_array_equal(bias[hidden:2 * hidden], 1.0)
    np.testing.assert_array_equal(bias[:hidden], 0.0)
    assert params["encoder.0.kernel"].decay and params["decoder.0.kernel"].decay
    assert not params["core.lstm.0.kernel"].decay
    assert not params["encoder.1.bn.gamma"].decay
    assert "encoder.0.bn.gamma" not in params
    assert "encoder.1.bn" in model.batch_norm_states()


def test_same_seed_same_initialization():
    """Test initialization depends only on the seed"""
    a, _ = preset_model("miniature")
    b, _ = preset_model("miniature")
    c, _ = preset_model("miniature", seed=5)
    for name, t in a.named_parameters().items():
        np.testing.assert_array_equal(t.data, b.named_parameters()[name].data)
    assert any(not np.array_equal(t.data, c.named_parameters()[n].data)
               for n, t in a.named_parameters().items() if t.size > 1)


def test_invalid_configurations():
    """Test schedules that cannot reach a 4×4 latent or split evenly"""
    with pytest.raises(ConfigError):
        ModelConfig(input_size=32).validate()
    with pytest.raises(ConfigError):
        ModelConfig(state_channels=8).validate()
    with pytest.raises(ConfigError):
        ModelConfig(input_frames=0).validate()
    with pytest.raises(ConfigError):
        ModelConfig(core_mode=CoreMode.CONVLSTM_ONLY, convlstm_hidden=8).validate()
    with pytest.raises(ConfigError):
        ModelConfig(kernel_size=5).validate()
    with pytest.raises(ConfigError):
        ModelConfig(dtype="float16").validate()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"layers": 3})


def test_config_dict_round_trip():
    """Test enums and tuples survive to_dict/from_dict"""
    config = resolve_config("kth-paper").model
    again = ModelConfig.from_dict(config.to_dict())
    assert again == config
    assert again.residual_mode is ResidualMode.FULL


def test_encode_latent_dims():
    """Test the encoder reaches the 4×4 latent split into s and d"""
    model, _ = preset_model("desk")
    pair, activations = model.encode(np.zeros((2, 1, 64, 64), dtype=np.float32))
    assert pair.s.dims == (2, 16, 4, 4)
    assert pair.d.dims == (2, 16, 4, 4)
    assert [a.dims[2] for a in activations] == [32, 16, 8, 4]
    assert np.all(np.abs(pair.s.data) <= 1.0)
    with pytest.raises(ShapeError):
        model.encode(np.zeros((2, 1, 32, 32), dtype=np.float32))


def test_predict_sequence_contract():
    """Test frame counts, dims and the zero-step case"""
    model, _ = preset_model("miniature")
    cfg = model.config
    rng = np.random.default_rng(0)
    inputs = rng.uniform(-1, 1, (2, cfg.input_frames, 1, 8, 8))
    frames = model.predict_sequence(inputs)
    assert len(frames) == cfg.predict_frames
    assert all(f.dims == (2, 1, 8, 8) for f in frames)
    assert model.predict_sequence(inputs, steps=0) == []
    assert model.rollout(inputs, 0).shape == (2, 0, 1, 8, 8)
    with pytest.raises(UsageError):
        model.predict_sequence(inputs[:, :2])
    with pytest.raises(UsageError):
        model.predict_sequence(inputs, steps=-1)


def test_eval_prediction_leaves_running_statistics():
    """Test inference does not update batch-norm statistics"""
    model, _ = preset_model("desk")
    before = {k: (s.running_mean.copy(), s.running_var.copy()) for k, s in model.batch_norm_states().items()}
    model.eval().rollout(np.random.default_rng(1).uniform(0, 1, (2, 10, 1, 64, 64)), 2)
    for key, state in model.batch_norm_states().items():
        np.testing.assert_array_equal(state.running_mean, before[key][0])
        np.testing.assert_array_equal(state.running_var, before[key][1])


def test_prediction_is_deterministic():
    """Test eval-mode rollout repeats exactly"""
    model, _ = preset_model("miniature")
    inputs = np.random.default_rng(2).uniform(-1, 1, (1, 3, 1, 8, 8))
    np.testing.assert_array_equal(model.rollout(inputs, 4), model.rollout(inputs, 4))


def test_decoder_sees_only_the_state_latent(monkeypatch):
    """Test perturbing d at t=T leaves the first predicted frame unchanged while the core ignores d"""
    model, _ = preset_model("desk")
    model.eval()
    rng = np.random.default_rng(3)
    inputs = rng.uniform(0, 1, (1, 10, 1, 64, 64)).astype(np.float32)
    noise = Tensor(rng.uniform(-1, 1, (1, 16, 4, 4)).astype(np.float32))
    encode = model.encode
    accumulate = model.accumulate_transform
    calls = []

    def perturbed_encode(frame):
        pair, activations = encode(frame)
        calls.append(frame)
        if len(calls) % 10 == 0:
            pair = LatentPair(s=pair.s, d=pair.d + noise)
        return pair, activations

    def fixed_core(core, d, s):
        return accumulate(core, zeros_like(d), s)

    monkeypatch.setattr(model, "accumulate_transform", fixed_core)
    reference = model.predict_sequence(inputs, 1)[0].data
    monkeypatch.setattr(model, "encode", perturbed_encode)
    perturbed = model.predict_sequence(inputs, 1)[0].data
    np.testing.assert_array_equal(perturbed, reference)

    monkeypatch.setattr(model, "accumulate_transform", accumulate)
    through_core = model.predict_sequence(inputs, 1)[0].data
    assert not np.array_equal(through_core, reference)


def test_skip_from_last_input_keeps_encoder_sources():
    """Test the skip ablation carries the same residual state every step"""
    model, _ = preset_model("desk", "skip-last-input")
    frame = np.random.default_rng(4).uniform(0, 1, (1, 1, 64, 64)).astype(np.float32)
    pair, activations = model.encode(frame)
    residual = model.seed_residuals(activations, Tensor(frame))
    _, carried = model.decode(pair.s, residual)
    assert carried is residual

    full, _ = preset_model("desk")
    pair, activations = full.encode(frame)
    residual = full.seed_residuals(activations, Tensor(frame))
    _, carried = full.decode(pair.s, residual)
    assert carried is not residual


def test_convlstm_only_feeds_hidden_state_as_next_latent():
    """Test the no-core ablation has no Phi operator"""
    model, _ = preset_model("desk", "no-core")
    with pytest.raises(UsageError):
        model.apply_transform(zeros((1, 16, 4, 4)), zeros((1, 16, 4, 4)))
    out = model.rollout(np.zeros((1, 10, 1, 64, 64), dtype=np.float32), 2)
    assert out.shape == (1, 2, 1, 64, 64)


def test_convlstm_step_with_zero_kernel():
    """Test c' = sigmoid(1)·c and h' = 0.5·tanh(c') with zero weights and forget bias 1"""
    hidden = 2
    kernel = Tensor(np.zeros((4 * hidden, 3 + hidden, 3, 3)))
    bias = np.zeros(4 * hidden)
    bias[hidden:2 * hidden] = 1.0
    c = np.random.default_rng(5).standard_normal((1, hidden, 4, 4))
    h_next, c_next = convlstm_step(zeros((1, 3, 4, 4), np.float64),
                                   (zeros((1, hidden, 4, 4), np.float64), Tensor(c)), kernel, Tensor(bias))
    expected_c = c / (1.0 + np.exp(-1.0))
    np.testing.assert_allclose(c_next.data, expected_c, atol=1e-12)
    np.testing.assert_allclose(h_next.data, 0.5 * np.tanh(expected_c), atol=1e-12)
    with pytest.raises(ShapeError):
        convlstm_step(zeros((1, 2, 4, 4)), (zeros((1, hidden, 4, 4)), zeros((1, hidden, 4, 4))),
                      kernel, Tensor(bias))


def scalar_lstm(x, h, c, w, b):
    """Textbook LSTM cell on one pixel's vectors"""
    hidden = h.size
    z = w @ np.concatenate([x, h]) + b
    i = 1.0 / (1.0 + np.exp(-z[:hidden]))
    f = 1.0 / (1.0 + np.exp(-z[hidden:2 * hidden]))
    o = 1.0 / (1.0 + np.exp(-z[2 * hidden:3 * hidden]))
    g = np.tanh(z[3 * hidden:])
    c_next = f * c + i * g
    return o * np.tanh(c_next), c_next


def test_pointwise_convlstm_matches_scalar_lstm():
    """Test a 1×1-kernel ConvLSTM is an independent LSTM cell at every pixel"""
    rng = np.random.default_rng(7)
    cin, hidden = 3, 2
    w = rng.standard_normal((4 * hidden, cin + hidden))
    b = rng.standard_normal(4 * hidden)
    x = rng.standard_normal((2, cin, 4, 4))
    h = rng.standard_normal((2, hidden, 4, 4))
    c = rng.standard_normal((2, hidden, 4, 4))
    h_next, c_next = convlstm_step(Tensor(x), (Tensor(h), Tensor(c)), Tensor(w[:, :, None, None]), Tensor(b))
    for n in range(2):
        for i in range(4):
            for j in range(4):
                eh, ec = scalar_lstm(x[n, :, i, j], h[n, :, i, j], c[n, :, i, j], w, b)
                np.testing.assert_allclose(h_next.data[n, :, i, j], eh, atol=1e-12)
                np.testing.assert_allclose(c_next.data[n, :, i, j], ec, atol=1e-12)


def test_apply_transform_with_zero_weights():
    """Test zero Phi parameters give s_next = 0 with the dims of s"""
    model, _ = preset_model("desk")
    model.eval()
    for name, t in model.named_parameters().items():
        if name.startswith("core.phi."):
            t.data[...] = 0.0
    rng = np.random.default_rng(8)
    g = Tensor(rng.standard_normal((2, 16, 4, 4)).astype(np.float32))
    s = Tensor(rng.uniform(-1, 1, (2, 16, 4, 4)).astype(np.float32))
    s_next = model.apply_transform(g, s)
    assert s_next.dims == s.dims
    np.testing.assert_array_equal(s_next.data, np.zeros(s.dims, dtype=np.float32))

    fresh, _ = preset_model("desk")
    moved = fresh.eval().apply_transform(g, s)
    assert moved.dims == s.dims
    assert np.any(moved.data != 0.0)


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, (1, 3, 4, 4), elements=st.floats(-100, 100)),
    arrays(np.float64, (1, 3, 4, 4), elements=st.floats(-100, 100)),
    arrays(np.float64, (1, 3, 1, 1), elements=st.floats(-50, 50)),
    st.floats(-50, 50),
)
def test_weighted_residual_is_convex(y, z, kernel, bias):
    """Test every output lies between its two operands"""
    gate = GateParams(kernel=Tensor(kernel), bias=Tensor(np.array([bias])))
    out = weighted_residual(Tensor(y), Tensor(z), gate).data
    low = np.minimum(y, z) - 1e-12 * (1.0 + np.abs(np.maximum(np.abs(y), np.abs(z))))
    high = np.maximum(y, z) + 1e-12 * (1.0 + np.abs(np.maximum(np.abs(y), np.abs(z))))
    assert np.all(out >= low) and np.all(out <= high)


def test_weighted_residual_gradients():
    """Test gate, operand and gate-input gradients against finite differences"""
    rng = np.random.default_rng(6)
    y = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    z = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    pre = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    gate = GateParams(kernel=Tensor(rng.standard_normal((1, 3, 1, 1)), requires_grad=True),
                      bias=Tensor(rng.standard_normal(1), requires_grad=True))

    def loss():
        out = weighted_residual(y, z, gate, gate_input=pre)
        return mean(out.square())

    with Tape() as tape:
        value = loss()
    grads = backward(tape, value)
    h = 1e-6
    for t in (y, z, pre, gate.kernel, gate.bias):
        for _ in range(4):
            index = tuple(rng.integers(0, d) for d in t.dims)
            original = t.data[index]
            t.data[index] = original + h
            plus = loss().item()
            t.data[index] = original - h
            minus = loss().item()
            t.data[index] = original
            numeric = (plus - minus) / (2 * h)
            assert abs(grads[t][index] - numeric) <= 1e-6 * max(1.0, abs(numeric))


def test_weighted_residual_dims_must_match():
    """Test mismatched operands are rejected"""
    gate = GateParams(kernel=Tensor(np.zeros((1, 2, 1, 1))), bias=Tensor(np.zeros(1)))
    with pytest.raises(ShapeError):
        weighted_residual(zeros((1, 2, 4, 4)), zeros((1, 2, 8, 8)), gate)


def test_long_rollout_stays_in_range():
    """Test a 100-frame recursive rollout is finite and inside the output range"""
    model, _ = preset_model("desk")
    inputs = np.random.default_rng(7).uniform(0, 1, (1, 10, 1, 64, 64)).astype(np.float32)
    out = model.eval().rollout(inputs, 100)
    assert out.shape == (1, 100, 1, 64, 64)
    assert np.all(np.isfinite(out))
    assert out.min() >= 0.0 and out.max() <= 1.0

    tanh_model, _ = preset_model("miniature")
    out = tanh_model.eval().rollout(np.random.default_rng(8).uniform(-1, 1, (1, 3, 1, 8, 8)), 100)
    assert np.all(np.isfinite(out))
    assert out.min() >= -1.0 and out.max() <= 1.0
