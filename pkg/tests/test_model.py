import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcast.linalg import ShapeError
from gridcast.model import (
    ARCHITECTURES,
    CheckpointError,
    Model,
    ModelConfig,
    build_model,
    checkpoint_bytes,
    forecast,
    load_checkpoint,
    model_backward,
    parameter_shapes,
    predict_windows,
    save_checkpoint,
)

from oracles import scalar_gru, worst_gradient_error


def toy(arch, **kw):
    base = dict(architecture=arch, input_dim=4, hidden_size=3, depth=2, seq_len=4, horizon=2,
                conv_filters=2, conv_kernel=2, dropout_rate=0.0)
    return ModelConfig(**{**base, **kw})


def randomise(model, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    for v in model.params.values():
        v[...] = rng.uniform(-scale, scale, v.shape)
    return model


def test_rnn_scalar_parameter_count():
    m = build_model(ModelConfig(architecture="rnn", input_dim=1, hidden_size=1, depth=1))
    assert m.parameter_count() == 5


def test_bigru_parameter_count_closed_form():
    d, n = 12, 32
    m = build_model(ModelConfig(architecture="bigru", input_dim=d, hidden_size=n, depth=3))

    def gru(d_in):
        return 3 * n * d_in + 3 * n * n + 3 * n

    expected = 2 * gru(d) + 2 * 2 * gru(n) + (d * n + d + d * n)
    assert m.parameter_count() == expected == sum(np.prod(s) for s in parameter_shapes(m.cfg).values())


def test_initialisation_is_seeded_glorot_with_zero_biases():
    cfg = ModelConfig(architecture="gru", input_dim=6, hidden_size=5, depth=2)
    a, b = build_model(cfg), build_model(cfg)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    for name, v in a.params.items():
        if v.ndim == 1:
            assert not np.any(v)
        else:
            assert np.max(np.abs(v)) <= np.sqrt(6.0 / sum(v.shape))
    assert not np.array_equal(a.params["L0.W_x"], build_model(cfg.replace(seed=1)).params["L0.W_x"])


@pytest.mark.parametrize("arch", ARCHITECTURES)
@pytest.mark.parametrize("horizon", [1, 3, 7])
def test_output_shape(arch, horizon):
    m = build_model(toy(arch))
    window = np.random.default_rng(0).normal(size=(4, 4))
    assert forecast(m, window, horizon).shape == (horizon, 4)
    assert m.forward(np.stack([window] * 3), horizon)[0].shape == (3, horizon, 4)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_zero_parameters_give_a_constant_forecast(arch):
    m = build_model(toy(arch))
    for v in m.params.values():
        v[...] = 0.0
    m.shift[...] = [1.0, 0.5, -0.2, 0.1]
    out = forecast(m, np.random.default_rng(1).normal(size=(4, 4)), 6)
    np.testing.assert_array_equal(out, np.tile(m.shift, (6, 1)))


def test_zero_weight_gru_follows_closed_form():
    # zero weights; a saturated update gate makes every step copy tanh(b)
    m = build_model(toy("gru", input_dim=2, hidden_size=2, depth=1, horizon=4))
    for v in m.params.values():
        v[...] = 0.0
    m.params["L0.b_z"][...] = 50.0  # z = 1: first step copies tanh(b)
    m.params["L0.b"][...] = [0.6, -0.3]
    m.params["out.W_oh"][...] = np.eye(2)
    enc = forecast(m, np.zeros((4, 2)), 1)[0]
    np.testing.assert_allclose(enc, np.tanh([0.6, -0.3]), atol=1e-15)
    m.params["L0.b_z"][...] = 0.0
    m.params["L0.b"][...] = 0.0
    # all-zero gates halve the state at every step, starting from zero
    np.testing.assert_array_equal(forecast(m, np.ones((4, 2)), 4), np.zeros((4, 2)))


def test_scalar_gru_model_matches_step_by_step_oracle():
    cfg = toy("gru", input_dim=2, hidden_size=1, depth=1, seq_len=3, horizon=3)
    m = randomise(build_model(cfg), 3, 0.9)
    m.shift[...] = [0.3, -0.1]
    m.scale[...] = [2.0, 0.5]
    window = np.random.default_rng(4).normal(size=(3, 2))
    P = {k.split(".", 1)[1]: v for k, v in m.params.items()}
    u = (window - m.shift) / m.scale

    def step(h, x):
        # scalar hidden unit, two inputs: fold the input projections into the biases
        proj = {g: (P[g] @ x).item() for g in ("W_zx", "W_rx", "W_x")}
        return scalar_gru(1, 1, 1, P["W_zh"].item(), P["W_rh"].item(), P["W_h"].item(),
                          proj["W_zx"] + P["b_z"].item(), proj["W_rx"] + P["b_r"].item(),
                          proj["W_x"] + P["b"].item(), h, 0.0)

    h = 0.0
    for x in u:
        h = step(h, x)
    inp, out = u[-1], []
    for _ in range(3):
        h = step(h, inp)
        y = P["W_oh"][:, 0] * h + P["b_o"]
        out.append(y * m.scale + m.shift)
        inp = y
    np.testing.assert_allclose(forecast(m, window), np.array(out), rtol=0, atol=1e-14)


def test_wrong_window_length_is_rejected():
    m = build_model(toy("gru"))
    with pytest.raises(ShapeError):
        forecast(m, np.zeros((5, 4)))
    with pytest.raises(ShapeError):
        forecast(m, np.zeros((4, 3)))


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_eval_forecast_is_bit_deterministic(arch):
    m = randomise(build_model(toy(arch, dropout_rate=0.3)), 0)
    w = np.random.default_rng(2).normal(size=(4, 4))
    assert forecast(m, w).tobytes() == forecast(m, w).tobytes()
    assert forecast(m, w, mode="train", seed=5).tobytes() == forecast(m, w, mode="train", seed=5).tobytes()


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_without_dropout_train_equals_eval(arch):
    m = randomise(build_model(toy(arch)), 1)
    w = np.random.default_rng(3).normal(size=(2, 4, 4))
    np.testing.assert_array_equal(m.forward(w, mode="train", seed=9)[0], m.forward(w, mode="eval")[0])


def test_dropout_changes_training_forecasts_only():
    m = randomise(build_model(toy("bigru", dropout_rate=0.5)), 1)
    w = np.random.default_rng(3).normal(size=(4, 4))
    assert not np.array_equal(forecast(m, w, mode="train", seed=1), forecast(m, w))


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_perfect_targets_give_zero_gradients(arch):
    m = randomise(build_model(toy(arch)), 5)
    w = np.random.default_rng(6).normal(size=(2, 4, 4))
    preds, cache = m.forward(w)
    loss, grads = model_backward(m, cache, preds)
    assert loss == 0.0
    assert all(not np.any(g) for g in grads.values())


def _fd_check(m, windows, targets, mode="eval", seed=None):
    _, cache = m.forward(windows, mode=mode, seed=seed)
    _, grads = m.backward(cache, targets)

    def loss():
        return 0.5 * np.sum((m.forward(windows, mode=mode, seed=seed)[0] - targets) ** 2)

    return {k: worst_gradient_error(loss, [(m.params[k], grads[k])]) for k in m.params}


def test_single_layer_scalar_model_gradients():
    m = randomise(build_model(toy("gru", input_dim=1, hidden_size=1, depth=1, horizon=2)), 7)
    rng = np.random.default_rng(8)
    errors = _fd_check(m, rng.normal(size=(3, 4, 1)), rng.normal(size=(3, 2, 1)))
    assert max(errors.values()) < 1e-5


def test_full_depth_bigru_gradients_per_tensor():
    cfg = ModelConfig(architecture="bigru", input_dim=4, hidden_size=5, depth=3, seq_len=5, horizon=3, dropout_rate=0.05)
    m = randomise(build_model(cfg), 9)
    rng = np.random.default_rng(10)
    errors = _fd_check(m, rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 3, 4)), mode="train", seed=11)
    assert max(errors.values()) < 1e-4, {k: v for k, v in errors.items() if v >= 1e-4}


def test_gradients_respect_normalisation():
    m = randomise(build_model(toy("gru", dropout_rate=0.0)), 12)
    m.shift[...] = [0.2, -0.4, 1.0, 0.0]
    m.scale[...] = [0.5, 2.0, 1.5, 0.25]
    rng = np.random.default_rng(13)
    w, y = rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 2, 4))
    _, cache = m.forward(w)
    loss, grads = m.backward(cache, y)

    def norm_loss():
        return 0.5 * np.sum(((m.forward(w)[0] - y) / m.scale) ** 2)

    assert loss == pytest.approx(norm_loss(), rel=1e-12)
    assert worst_gradient_error(norm_loss, [(m.params[k], grads[k]) for k in m.params]) < 1e-5


def test_teacher_forcing_feeds_targets():
    cfg = toy("gru", teacher_forcing=True, horizon=3)
    m = randomise(build_model(cfg), 14)
    rng = np.random.default_rng(15)
    w, y = rng.normal(size=(4, 4)), rng.normal(size=(3, 4))
    forced = m.forward(w, mode="train", targets=y)[0]
    free = m.forward(w, mode="eval")[0]
    np.testing.assert_array_equal(forced[0], free[0])
    assert not np.array_equal(forced[1:], free[1:])
    _, cache = m.forward(w[None], mode="train", targets=y[None])
    _, grads = m.backward(cache, y[None])

    def loss():
        return 0.5 * np.sum((m.forward(w[None], mode="train", targets=y[None])[0] - y[None]) ** 2)

    assert worst_gradient_error(loss, [(m.params[k], grads[k]) for k in m.params]) < 1e-5


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_checkpoint_round_trip(tmp_path, arch):
    m = randomise(build_model(toy(arch)), 16)
    m.shift[...] = np.arange(4.0)
    m.scale[...] = np.linspace(0.5, 2.0, 4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.cfg == m.cfg
    assert checkpoint_bytes(back) == path.read_bytes()
    w = np.random.default_rng(0).normal(size=(4, 4))
    assert forecast(back, w).tobytes() == forecast(m, w).tobytes()


def test_checkpoint_header_layout(tmp_path):
    import json
    import struct

    m = build_model(toy("rnn"))
    buf = checkpoint_bytes(m)
    assert buf[:8] == b"GRIDCAST"
    assert struct.unpack_from("<I", buf, 8)[0] == 1
    (n,) = struct.unpack_from("<Q", buf, 12)
    assert ModelConfig.from_dict(json.loads(buf[20 : 20 + n])) == m.cfg


@pytest.mark.parametrize("mutate", [lambda b: b"XX" + b[2:], lambda b: b[:-3], lambda b: b + b"\0"])
def test_corrupt_checkpoints_are_rejected(tmp_path, mutate):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(mutate(checkpoint_bytes(build_model(toy("gru")))))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(architecture="lstm")
    with pytest.raises(ValueError):
        ModelConfig(depth=0)
    with pytest.raises(ValueError):
        ModelConfig(architecture="conv_bigru", seq_len=3, conv_kernel=5)
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"architecture": "gru", "colour": "blue"})
    with pytest.raises(ShapeError):
        Model(toy("gru"), {})


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(ARCHITECTURES), st.integers(1, 7), st.integers(1, 9))
def test_predict_windows_batches_consistently(arch, n_windows, batch_size):
    m = randomise(build_model(toy(arch)), 17)
    w = np.random.default_rng(n_windows).normal(size=(n_windows, 4, 4))
    np.testing.assert_allclose(predict_windows(m, w, batch_size=batch_size), m.forward(w)[0], rtol=0, atol=1e-13)
