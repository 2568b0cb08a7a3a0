import numpy as np
import pytest

from uqsim import neuralnet
from uqsim.datagen import Dataset, generate, toy_cubic
from uqsim.harness import Standardizer
from uqsim.mathstat import make_stream
from uqsim.neuralnet import (
    MlpConfig,
    TrainingDivergedError,
    fit,
    init_params,
    layer_sizes,
    loss_and_gradient,
    predict,
    predict_passes,
)

SMALL = MlpConfig(hidden_sizes=(8, 6), epochs=5)


def test_config_validation():
    with pytest.raises(ValueError):
        MlpConfig(hidden_sizes=())
    with pytest.raises(ValueError):
        MlpConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        MlpConfig(epochs=0)
    with pytest.raises(ValueError):
        MlpConfig(learning_rate=0)


def test_layer_shapes_chain():
    model = fit(np.zeros((4, 3)), np.zeros(4), SMALL, make_stream(0))
    shapes = [W.shape for W, _ in model.layers()]
    assert shapes == [(3, 8), (8, 6), (6, 1)]
    assert model.params.size == neuralnet.n_params(model.sizes)


def test_constant_zero_targets():
    rng = make_stream(1)
    X = rng.uniform(-1, 1, (200, 1))
    model = fit(X, np.zeros(200), MlpConfig(hidden_sizes=(20,), epochs=40), make_stream(2))
    assert np.sqrt(np.mean(predict(model, X) ** 2)) <= 0.01


def test_linear_target():
    rng = make_stream(3)
    X = rng.uniform(-1, 1, (1000, 1))
    y = 2 * X[:, 0] + 1
    # least-squares oracle: the target is exactly linear
    A = np.column_stack([X[:, 0], np.ones(1000)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    assert np.allclose(coef, [2, 1])
    model = fit(X, y, neuralnet.DEFAULT_NET, make_stream(4))
    X_test = rng.uniform(-1, 1, (500, 1))
    rmse = np.sqrt(np.mean((predict(model, X_test) - (2 * X_test[:, 0] + 1)) ** 2))
    assert rmse <= 0.05


def test_cubic_toy_reaches_noise_floor():
    dgp = toy_cubic()
    train = generate(dgp, 1000, make_stream(5))
    test = generate(dgp, 1000, make_stream(6))
    tf = Standardizer.fit(train)
    model = fit(tf.transform_X(train.X), tf.transform_y(train.y), neuralnet.DEFAULT_NET, make_stream(7))
    pred = tf.inverse_y(predict(model, tf.transform_X(test.X)))
    oracle = np.sqrt(np.mean((dgp.true_mean(test.X) - test.y) ** 2))
    assert oracle == pytest.approx(0.2, abs=0.015)
    assert np.sqrt(np.mean((pred - test.y) ** 2)) <= 0.25


def test_training_mse_decreases():
    dgp = toy_cubic()
    train = generate(dgp, 500, make_stream(8))
    tf = Standardizer.fit(train)
    for p in (0.0, 0.1, 0.5):
        model = fit(tf.transform_X(train.X), tf.transform_y(train.y),
                    neuralnet.DEFAULT_NET.replace(dropout_rate=p), make_stream(9))
        assert len(model.history) == 40
        assert model.history[-1] <= model.history[0]


def test_gradient_clipping_keeps_training_finite():
    rng = make_stream(12)
    X = rng.normal(size=(50, 1)) * 10
    model = fit(X, X[:, 0] * 100, SMALL.replace(learning_rate=10.0, grad_clip=1.0), make_stream(13))
    assert np.all(np.isfinite(model.params))


def test_fit_is_deterministic():
    rng = make_stream(10)
    X = rng.normal(size=(100, 2))
    y = np.sin(X[:, 0]) + X[:, 1]
    cfg = SMALL.replace(dropout_rate=0.2)
    a = fit(X, y, cfg, make_stream(11))
    b = fit(X, y, cfg, make_stream(11))
    assert a.params.tobytes() == b.params.tobytes()


def test_divergence_names_epoch():
    rng = make_stream(12)
    X = rng.normal(size=(50, 1)) * 10
    with pytest.raises(TrainingDivergedError, match="epoch 1"):
        fit(X, X[:, 0] * 100, SMALL.replace(learning_rate=10.0, grad_clip=0.0), make_stream(13))


def test_fit_rejects_bad_shapes():
    with pytest.raises(ValueError):
        fit(np.zeros((5, 1)), np.zeros(4), SMALL, make_stream(0))
    with pytest.raises(ValueError):
        fit(np.zeros(5), np.zeros(5), SMALL, make_stream(0))


def test_predict_shape_mismatch():
    model = fit(np.zeros((4, 2)), np.zeros(4), SMALL, make_stream(0))
    with pytest.raises(ValueError):
        predict(model, np.zeros((3, 3)))


def _trained(p, seed=14):
    rng = make_stream(seed)
    X = rng.uniform(-1, 1, (300, 1))
    y = X[:, 0] ** 2 + 0.1 * rng.normal(size=300)
    return fit(X, y, MlpConfig(hidden_sizes=(20, 20), dropout_rate=p, epochs=10), make_stream(seed + 1)), X


def test_dropout_with_zero_rate_is_plain_forward():
    model, X = _trained(0.0)
    assert np.array_equal(predict(model, X, dropout_active=True, rng=make_stream(1)), predict(model, X))


def test_deterministic_predict_repeats():
    model, X = _trained(0.3)
    assert np.array_equal(predict(model, X), predict(model, X))


def test_dropout_passes_spread():
    model, X = _trained(0.5)
    passes = predict_passes(model, X[:1], 100, make_stream(2))
    assert passes.shape == (100, 1)
    assert passes[:, 0].std(ddof=1) > 0


def test_dropout_needs_stream():
    model, X = _trained(0.3)
    with pytest.raises(ValueError):
        predict(model, X, dropout_active=True)


def test_gradient_matches_finite_differences():
    rng = make_stream(20)
    X = rng.normal(size=(5, 3))
    y = rng.normal(size=5)
    sizes = layer_sizes(3, MlpConfig(hidden_sizes=(6, 4)))
    model = neuralnet.Mlp(MlpConfig(hidden_sizes=(6, 4)), sizes, init_params(sizes, rng))
    model.params += 0.05 * rng.normal(size=model.params.size)  # move biases off zero
    _, grad = loss_and_gradient(model, X, y)
    h = 1e-5
    fd = np.empty_like(grad)
    for q in range(grad.size):
        saved = model.params[q]
        model.params[q] = saved + h
        up, _ = loss_and_gradient(model, X, y)
        model.params[q] = saved - h
        down, _ = loss_and_gradient(model, X, y)
        model.params[q] = saved
        fd[q] = (up - down) / (2 * h)
    rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-6)
    assert np.max(rel[np.abs(fd) > 1e-6]) <= 1e-4
    assert np.max(np.abs(grad - fd)) <= 1e-8


def test_dropout_mask_expectation():
    # Exact in expectation for one hidden layer; with more layers the ReLU
    # between masks makes the mean pass differ from the plain pass.
    cfg = MlpConfig(hidden_sizes=(16,), dropout_rate=0.3)
    sizes = layer_sizes(2, cfg)
    model = neuralnet.Mlp(cfg, sizes, init_params(sizes, make_stream(23)))
    X = make_stream(22).normal(size=(5, 2))
    passes = predict_passes(model, X, 10_000, make_stream(24))
    se = passes.std(axis=0, ddof=1) / np.sqrt(10_000)
    assert np.all(np.abs(passes.mean(axis=0) - predict(model, X)) <= 3 * se)


def test_snapshot_round_trip(tmp_path):
    model, X = _trained(0.2)
    path = tmp_path / "net.json"
    neuralnet.save_snapshot(model, path)
    back = neuralnet.load_snapshot(path)
    assert back.config == model.config
    assert np.array_equal(back.params, model.params)
    assert np.array_equal(predict(back, X), predict(model, X))


def test_snapshot_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        neuralnet.load_snapshot(path)


def test_dataset_fixture_shapes():
    d = Dataset(np.zeros((3, 2)), np.zeros(3))
    assert d.feature_names == ["x0", "x1"]
