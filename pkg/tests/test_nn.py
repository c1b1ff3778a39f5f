import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecglite.errors import BatchTooSmall, DegenerateDistribution, ShapeError, StateError
from ecglite.labels import ClassWeights
from ecglite.model_format import decode_model, encode_model
from ecglite.nn import (AdamState, ModelConfig, TrainConfig, adam_step, forward_with_cache,
                        history_csv, init_params, model_backward, model_forward, param_shapes,
                        predict, train_model)
from ecglite.nn import layers as L
from ecglite.synthetic import make_dataset

from .gradcheck import model_case, model_coords, model_grads, model_loss, numeric_grad, rel_error

TOL = 1e-5


# --- layer examples ----------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = rng.normal(size=(2, 3, 10))
    w = np.zeros((1, 3, 3))
    w[0] = np.eye(3)
    np.testing.assert_array_equal(L.conv1d_forward(x, w, np.zeros(3)), x)


def test_conv_hand_example():
    x = np.array([[[1.0, 2.0, 3.0]]])
    w = np.array([1.0, 0.0, -1.0]).reshape(3, 1, 1)
    np.testing.assert_array_equal(L.conv1d_forward(x, w, np.zeros(1))[0, 0], [-2, -2, 2])


def test_conv_bias_only(rng):
    y = L.conv1d_forward(rng.normal(size=(2, 2, 9)), np.zeros((5, 2, 4)), np.full(4, 5.0))
    assert y.shape == (2, 4, 9) and np.all(y == 5.0)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        L.conv1d_forward(np.zeros((1, 2, 8)), np.zeros((3, 3, 4)), np.zeros(4))
    with pytest.raises(ShapeError):
        L.conv1d_forward(np.zeros((1, 2, 8)), np.zeros((4, 2, 4)), np.zeros(4))
    with pytest.raises(ShapeError):
        L.conv1d_forward(np.zeros((1, 2, 8)), np.zeros((3, 2, 4)), np.zeros(3))


def test_conv_matches_scipy_correlate(rng):
    from scipy.signal import correlate
    x = rng.normal(size=(2, 3, 20))
    w = rng.normal(size=(5, 3, 4))
    b = rng.normal(size=4)
    y = L.conv1d_forward(x, w, b)
    for n in range(2):
        for o in range(4):
            ref = sum(correlate(x[n, c], w[:, c, o], mode="same") for c in range(3)) + b[o]
            np.testing.assert_allclose(y[n, o], ref, atol=1e-12)


def test_batchnorm_hand_example():
    x = np.array([[[1.0, 2.0, 3.0]], [[1.0, 2.0, 3.0]]])
    y, _ = L.batchnorm_forward(x, np.ones(1), np.zeros(1), np.zeros(1), np.ones(1))
    np.testing.assert_allclose(y[0, 0], [-1.2238, 0, 1.2238], atol=1e-4)
    np.testing.assert_allclose(y[0, 0, 2], 1 / np.sqrt(2 / 3 + 1e-3), rtol=1e-12)


def test_batchnorm_constant_channel():
    y, _ = L.batchnorm_forward(np.full((2, 1, 5), 3.0), np.ones(1), np.full(1, 0.7),
                               np.zeros(1), np.ones(1))
    np.testing.assert_allclose(y, 0.7, atol=1e-12)


def test_batchnorm_eval_identity(rng):
    x = rng.normal(size=(1, 2, 6))
    y, cache = L.batchnorm_forward(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), mode="eval")
    assert cache is None
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-3), rtol=1e-12)


def test_batchnorm_batch_of_one():
    with pytest.raises(BatchTooSmall):
        L.batchnorm_forward(np.zeros((1, 2, 5)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2))


def test_batchnorm_moving_stats_update(rng):
    x = rng.normal(2.0, 3.0, size=(4, 2, 50))
    mm, mv = np.zeros(2), np.ones(2)
    L.batchnorm_forward(x, np.ones(2), np.zeros(2), mm, mv, momentum=0.99)
    np.testing.assert_allclose(mm, 0.01 * x.mean(axis=(0, 2)), rtol=1e-12)
    np.testing.assert_allclose(mv, 0.99 + 0.01 * x.var(axis=(0, 2)), rtol=1e-12)
    # bias-corrected form: the first update copies the batch statistics
    mm, mv = np.zeros(2), np.ones(2)
    L.batchnorm_forward(x, np.ones(2), np.zeros(2), mm, mv, momentum=0.99, step=1)
    np.testing.assert_allclose(mm, x.mean(axis=(0, 2)), rtol=1e-12)
    np.testing.assert_allclose(mv, x.var(axis=(0, 2)), rtol=1e-12)


@given(st.integers(2, 6), st.integers(1, 4), st.integers(1, 40), st.integers(0, 2 ** 32 - 1))
def test_batchnorm_train_output_standardized(n, c, length, seed):
    x = np.random.default_rng(seed).normal(1.0, 5.0, size=(n, c, length))
    y, _ = L.batchnorm_forward(x, np.ones(c), np.zeros(c), np.zeros(c), np.ones(c), eps=1e-3)
    var = x.var(axis=(0, 2))
    np.testing.assert_allclose(y.mean(axis=(0, 2)), 0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=(0, 2)), var / (var + 1e-3), rtol=1e-9)


def test_leaky_relu_examples():
    np.testing.assert_array_equal(L.leaky_relu(np.array([2.0, -1.0]), 0.3), [2.0, -0.3])
    x = np.linspace(-3, 3, 11)
    np.testing.assert_array_equal(L.leaky_relu(x, 1.0), x)


def test_maxpool_examples():
    y, idx = L.maxpool1d_forward(np.array([[[1.0, 3.0, 2.0, 5.0]]]))
    np.testing.assert_array_equal(y, [[[3, 5]]])
    y, _ = L.maxpool1d_forward(np.array([[[1.0, 3.0, 2.0]]]))
    np.testing.assert_array_equal(y, [[[3]]])
    y, idx = L.maxpool1d_forward(np.array([[[7.0, 7.0]]]))
    assert y[0, 0, 0] == 7 and idx[0, 0, 0] == 0
    with pytest.raises(ShapeError):
        L.maxpool1d_forward(np.zeros((1, 1, 1)))


@given(st.integers(1, 3), st.integers(1, 3), st.integers(2, 41), st.integers(0, 2 ** 32 - 1))
def test_maxpool_backward_routes_each_gradient_once(n, c, length, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c, length))
    y, idx = L.maxpool1d_forward(x)
    dy = rng.normal(size=y.shape)
    dx = L.maxpool1d_backward(dy, idx, length)
    assert dx.shape == x.shape
    np.testing.assert_allclose(dx.sum(), dy.sum(), rtol=1e-12, atol=1e-12)
    assert np.count_nonzero(dx) == np.count_nonzero(dy)


def test_dense_examples():
    np.testing.assert_array_equal(
        L.dense_forward(np.array([[1.0, 2.0]]), np.array([[1.0, 0.0], [0.0, 2.0]]), np.ones(2)), [[2, 5]])
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(L.dense_forward(x, np.eye(2), np.zeros(2)), x)
    np.testing.assert_array_equal(L.dense_forward(x, np.zeros((2, 3)), np.array([1.0, 2, 3])),
                                  np.tile([1.0, 2, 3], (3, 1)))
    with pytest.raises(ShapeError):
        L.dense_forward(x, np.zeros((3, 3)), np.zeros(3))


def test_sigmoid_examples():
    assert L.sigmoid(np.array(0.0)) == 0.5
    assert abs(float(L.sigmoid(np.array(1.0))) - 0.73105857863) < 1e-9
    p = L.sigmoid(np.array([-1000.0, 1000.0]))
    assert np.all((p > 0) & (p < 1))
    p32 = L.sigmoid(np.array([-1000.0, 1000.0], dtype=np.float32))
    assert p32.dtype == np.float32 and np.all((p32 > 0) & (p32 < 1))


def test_bce_examples():
    assert L.weighted_bce([0.5], [1], (1.0, 1.0)) == pytest.approx(np.log(2), abs=1e-12)
    assert L.weighted_bce([1.0], [1], None) < 1e-6
    p, y = np.array([0.2, 0.9, 0.6]), np.array([0, 1, 0])
    assert L.weighted_bce(p, y, (2.0, 4.0)) == pytest.approx(2 * L.weighted_bce(p, y, (1.0, 2.0)))
    assert np.isfinite(L.weighted_bce([0.0, 1.0], [1, 0], None))


def test_logit_gradient_example():
    assert L.bce_logit_grad(np.array([0.5]), np.array([1]), (1.0, 1.0))[0] == -0.5


# --- finite differences: layers in isolation -----------------------------------------

def _projected(fn, out_shape, rng):
    r = rng.normal(size=out_shape)
    return (lambda: float(np.sum(fn() * r))), r


@pytest.mark.parametrize("seed", range(20))
def test_fd_conv(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, 2, 64)), rng.normal(size=(5, 2, 3)), rng.normal(size=3)
    f, r = _projected(lambda: L.conv1d_forward(x, w, b), (2, 3, 64), rng)
    dx, dw, db = L.conv1d_backward(r, x, w)
    for analytic, arr in ((dx, x), (dw, w), (db, b)):
        assert rel_error(analytic, numeric_grad(f, arr)) < TOL


@pytest.mark.parametrize("seed", range(20))
def test_fd_batchnorm(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 64))
    g, beta = rng.uniform(0.5, 1.5, 2), rng.normal(size=2)

    def fwd():
        return L.batchnorm_forward(x, g, beta, np.zeros(2), np.ones(2), update_stats=False)[0]

    f, r = _projected(fwd, x.shape, rng)
    _, cache = L.batchnorm_forward(x, g, beta, np.zeros(2), np.ones(2), update_stats=False)
    dx, dg, db = L.batchnorm_backward(r, cache)
    for analytic, arr in ((dx, x), (dg, g), (db, beta)):
        assert rel_error(analytic, numeric_grad(f, arr)) < TOL


@pytest.mark.parametrize("seed", range(20))
def test_fd_pointwise_and_pool(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 64))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    f, r = _projected(lambda: L.leaky_relu(x, 0.3), x.shape, rng)
    assert rel_error(L.leaky_relu_backward(r, x, 0.3), numeric_grad(f, x)) < TOL

    f, r = _projected(lambda: L.maxpool1d_forward(x)[0], (2, 2, 32), rng)
    _, idx = L.maxpool1d_forward(x)
    assert rel_error(L.maxpool1d_backward(r, idx, 64), numeric_grad(f, x)) < TOL


@pytest.mark.parametrize("seed", range(20))
def test_fd_dense(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, 6)), rng.normal(size=(6, 4)), rng.normal(size=4)
    f, r = _projected(lambda: L.dense_forward(x, w, b), (2, 4), rng)
    dx, dw, db = L.dense_backward(r, x, w)
    for analytic, arr in ((dx, x), (dw, w), (db, b)):
        assert rel_error(analytic, numeric_grad(f, arr)) < TOL


@pytest.mark.parametrize("seed", range(20))
def test_fd_sigmoid_bce(seed):
    rng = np.random.default_rng(seed)
    z, y = rng.normal(0, 2, size=2), np.array([0, 1])
    w = (rng.uniform(0.5, 2), rng.uniform(0.5, 2))
    f = lambda: L.weighted_bce(L.sigmoid(z), y, w)  # noqa: E731
    assert rel_error(L.bce_logit_grad(L.sigmoid(z), y, w), numeric_grad(f, z)) < TOL


# --- finite differences: end to end ----------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_fd_model_sampled(seed):
    """Default widths, 2 channels, length 64, batch 2: 8 random coordinates per tensor."""
    config, params, x, y, w = model_case(seed)
    grads = model_grads(config, params, x, y, w)
    rng = np.random.default_rng(1000 + seed)
    f = lambda: model_loss(config, params, x, y, w)  # noqa: E731
    skipped = 0
    for name, g in grads.items():
        # coordinates whose +-h step flips a ReLU sign or pool winner have no derivative
        coords, n_skip = model_coords(config, params, x, name, min(8, g.size), rng)
        skipped += n_skip
        num = numeric_grad(f, params[name], coords)
        assert rel_error(g.reshape(-1)[coords], num) < TOL, name
    assert skipped <= 3


@pytest.mark.parametrize("seed", range(3))
def test_fd_model_every_element(seed):
    config, params, x, y, w = model_case(seed, narrow=True)
    grads = model_grads(config, params, x, y, w)
    f = lambda: model_loss(config, params, x, y, w)  # noqa: E731
    for name, g in grads.items():
        coords, skipped = model_coords(config, params, x, name, g.size, np.random.default_rng(0))
        assert skipped <= 3 and len(coords) >= g.size - 3
        assert rel_error(g.reshape(-1)[coords], numeric_grad(f, params[name], coords)) < TOL, name


def test_conv_bias_before_bn_has_zero_gradient():
    config, params, x, y, w = model_case(0)
    grads = model_grads(config, params, x, y, w)
    for i in range(6):
        assert np.max(np.abs(grads[f"block{i}.conv.b"])) < 1e-12


def test_zero_input_zero_weights_gradients():
    config = ModelConfig(in_channels=2, input_length=64)
    params = init_params(config, 0)
    for name in params.names():
        if name.endswith(".w"):
            params[name][...] = 0.0
    grads = model_grads(config, params, np.zeros((2, 2, 64)), np.array([0, 1]), (1.0, 1.0))
    for name, g in grads.items():
        if name.endswith("conv.w"):
            assert not g.any(), name
    # p = 0.5 for both samples: dL/db2 = mean(p - y) = 0 with unit weights;
    # with unequal weights it is not
    g = model_grads(config, params, np.zeros((2, 2, 64)), np.array([0, 1]), (1.0, 3.0))
    assert g["dense2.b"][0] == pytest.approx((0.5 * 1.0 - 0.5 * 3.0) / 2)


def test_backward_needs_train_cache():
    config, params, x, y, w = model_case(0)
    with pytest.raises(StateError):
        model_backward(config, params, None, y, w)
    _, cache = forward_with_cache(config, params, x, "eval")
    with pytest.raises(StateError):
        model_backward(config, params, cache, y, w)


# --- model ---------------------------------------------------------------------------------------

def test_default_shape_chain():
    config = ModelConfig()
    assert config.block_lengths() == [1000, 500, 250, 125, 62, 31, 15]
    assert config.flatten_width == 960
    shapes = dict((n, s) for n, s, _ in param_shapes(config))
    assert shapes["dense1.w"] == (960, 32) and shapes["dense2.w"] == (32, 1)
    assert shapes["block0.conv.w"] == (7, 12, 16)


@pytest.mark.parametrize("channels", [1, 3, 6, 12])
def test_forward_range_and_determinism(channels):
    config = ModelConfig(in_channels=channels)
    x = np.random.default_rng(channels).normal(size=(3, channels, 1000))
    a = predict(config, init_params(config, 5), x)
    b = predict(config, init_params(config, 5), x)
    assert a.shape == (3,) and np.all((a > 0) & (a < 1))
    assert np.array_equal(a, b)


def test_forward_shape_errors():
    config = ModelConfig(in_channels=2, input_length=64)
    params = init_params(config, 0)
    with pytest.raises(ShapeError):
        predict(config, params, np.zeros((1, 3, 64)))
    params["block2.conv.w"] = np.zeros((5, 7, 32))
    with pytest.raises(ShapeError, match="block2"):
        predict(config, params, np.zeros((1, 2, 64)))


def test_config_validation():
    for bad in (dict(conv_filters=(1, 2, 3)), dict(input_length=63), dict(conv_kernels=(4,) * 6),
                dict(pool_size=3), dict(in_channels=0)):
        with pytest.raises(ShapeError):
            ModelConfig(**bad)


def test_predict_is_eval_forward(rng):
    config = ModelConfig(in_channels=2, input_length=128)
    params = init_params(config, 1)
    x = rng.normal(size=(4, 2, 128))
    assert np.array_equal(predict(config, params, x), model_forward(config, params, x, "eval"))


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 7))
def test_eval_batch_independence(seed, cut):
    config = ModelConfig(in_channels=2, input_length=64)
    params = init_params(config, 3)
    x = np.random.default_rng(seed).normal(size=(8, 2, 64))
    full = predict(config, params, x, dtype=np.float32)
    parts = np.concatenate([predict(config, params, x[:cut], dtype=np.float32),
                            predict(config, params, x[cut:], dtype=np.float32)])
    np.testing.assert_array_equal(full, parts)
    np.testing.assert_array_equal(predict(config, params, x[cut:cut + 1], dtype=np.float32),
                                  full[cut:cut + 1])


def test_loaded_params_reproduce_predictions(rng):
    config = ModelConfig(in_channels=3)
    params = init_params(config, 2)
    x = rng.normal(size=(4, 3, 1000))
    cfg2, loaded = decode_model(encode_model(config, params))
    assert cfg2 == config
    np.testing.assert_array_equal(predict(config, params.astype(np.float32), x, dtype=np.float32),
                                  predict(cfg2, loaded, x, dtype=np.float32))


def test_float32_inference_close_to_float64(rng):
    config = ModelConfig(in_channels=2, input_length=256)
    params = init_params(config, 4)
    x = rng.normal(size=(5, 2, 256))
    np.testing.assert_allclose(predict(config, params, x, dtype=np.float32),
                               predict(config, params, x), atol=1e-5)


def test_init_is_truncated_fan_in(rng):
    config = ModelConfig()
    params = init_params(config, 0)
    w = params["block3.conv.w"]
    std = np.sqrt(2.0 / (5 * 32))
    assert np.max(np.abs(w)) <= 2 * std / 0.87962566103423978
    assert abs(w.std() / std - 1) < 0.05
    assert np.all(params["block0.bn.gamma"] == 1) and np.all(params["block0.bn.moving_var"] == 1)


# --- Adam ----------------------------------------------------------------------------------------

def test_adam_zero_gradient():
    p = {"a": np.array([1.0, -2.0])}
    state = AdamState.zeros_like(p, ["a"])
    adam_step(p, {"a": np.zeros(2)}, state, TrainConfig())
    np.testing.assert_array_equal(p["a"], [1.0, -2.0])
    assert state.t == 1


def test_adam_first_step_is_lr():
    p = {"a": np.zeros(1), "b": np.zeros(1)}
    state = AdamState.zeros_like(p, ["a", "b"])
    adam_step(p, {"a": np.array([0.3]), "b": np.array([30.0])}, state, TrainConfig())
    assert p["a"][0] == pytest.approx(-1e-3, rel=1e-5)
    assert p["b"][0] == pytest.approx(p["a"][0], rel=1e-5)


def test_adam_matches_reference_recurrence(rng):
    tc = TrainConfig(learning_rate=0.01)
    theta = rng.normal(size=5)
    p = {"w": theta.copy()}
    state = AdamState.zeros_like(p, ["w"])
    m = v = np.zeros(5)
    ref = theta.copy()
    for t in range(1, 6):
        g = rng.normal(size=5)
        adam_step(p, {"w": g}, state, tc)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-7)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-13)


def test_adam_shape_mismatch():
    p = {"a": np.zeros(2)}
    with pytest.raises(ShapeError):
        adam_step(p, {"a": np.zeros(3)}, AdamState.zeros_like(p, ["a"]), TrainConfig())


# --- training ---------------------------------------------------------------------------------------

def _small_data(n=64, seed=0, length=256):
    recs, y, _ = make_dataset(n, fs=100, seconds=length / 100, leads=("I", "II"), seed=seed)
    from ecglite.dsp import PreprocessConfig, preprocess_signal
    cfg = PreprocessConfig(rolling_enabled=False)
    x = np.stack([preprocess_signal(r.samples, 100, cfg) for r in recs])
    return x, y


@pytest.fixture(scope="module")
def small_data():
    return _small_data()


def test_overfit_32_samples(small_data):
    x, y = small_data[0][:32], small_data[1][:32]
    config = ModelConfig(in_channels=2, input_length=256)
    tc = TrainConfig(epochs=200, batch_size=32, shuffle_seed=1, init_seed=1)
    params, hist, _ = train_model((x, y), None, config, tc)
    acc = np.mean((predict(config, params, x) >= 0.5) == (y == 1))
    assert acc >= 0.95
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]


def test_training_is_deterministic(small_data):
    x, y = small_data
    config = ModelConfig(in_channels=2, input_length=256)
    tc = TrainConfig(epochs=3, batch_size=16, shuffle_seed=7, init_seed=3)
    p1, h1, s1 = train_model((x[:48], y[:48]), (x[48:], y[48:]), config, tc)
    p2, h2, s2 = train_model((x[:48], y[:48]), (x[48:], y[48:]), config, tc)
    assert history_csv(h1) == history_csv(h2)
    for name in p1.names():
        assert np.array_equal(p1[name], p2[name]), name
    assert s1.t == s2.t == 9


def test_loss_drops_over_first_epoch(small_data):
    x, y = small_data
    config = ModelConfig(in_channels=2, input_length=256)
    tc = TrainConfig(epochs=1, batch_size=8, init_seed=0)
    params = init_params(config, 0)
    before = L.weighted_bce(predict(config, params, x), y, None)
    trained, _, _ = train_model((x, y), None, config, tc, params=params.copy())
    after = L.weighted_bce(predict(config, trained, x), y, None)
    assert after < before


def test_train_rejects_one_class(small_data):
    x, _ = small_data
    config = ModelConfig(in_channels=2, input_length=256)
    with pytest.raises(DegenerateDistribution):
        train_model((x[:4], np.ones(4)), None, config, TrainConfig(epochs=1))


def test_trailing_singleton_batch_is_merged(small_data):
    x, y = small_data
    config = ModelConfig(in_channels=2, input_length=256)
    # 33 samples with batch 32 would leave a batch of one, which BN cannot train on
    _, hist, state = train_model((x[:33], y[:33]), None, config, TrainConfig(epochs=2))
    assert state.t == 2 and len(hist) == 2


def test_class_weights_are_used(small_data):
    x, y = small_data
    config = ModelConfig(in_channels=2, input_length=256)
    a = train_model((x, y), None, config, TrainConfig(epochs=1, class_weights=ClassWeights(1.0, 1.0)))
    b = train_model((x, y), None, config, TrainConfig(epochs=1, class_weights=ClassWeights(3.0, 0.5)))
    assert not np.array_equal(a[0]["dense2.b"], b[0]["dense2.b"])


def test_history_csv_columns():
    text = history_csv([{"epoch": 1, "train_loss": 0.5, "val_loss": 0.25, "val_accuracy": 1.0}])
    assert text.splitlines() == ["epoch,train_loss,val_loss,val_accuracy", "1,0.5,0.25,1.0"]
