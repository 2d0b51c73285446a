import numpy as np
import pytest

from cmsnet import runtime as R
from cmsnet import tensor as T
from cmsnet.errors import ConfigError, NumericError
from cmsnet.graph import build_arrangement


@pytest.fixture
def smooth_activation(monkeypatch):
    """Swap relu6 for tanh so finite differences see a smooth function."""
    monkeypatch.setattr(T, "relu6", np.tanh)
    monkeypatch.setattr(T, "relu6_backward", lambda g, x: g * (1 - np.tanh(x) ** 2))


def _randomize_bn(graph, rng):
    for k, v in graph.weights.items():
        if k.endswith("/mean"):
            graph.weights[k] = rng.normal(0, 0.2, v.shape)
        elif k.endswith("/var"):
            graph.weights[k] = rng.uniform(0.5, 1.5, v.shape)


@pytest.mark.parametrize("name", ["CM0", "CM1", "CM2", "CM6", "CM7"])
def test_whole_graph_directional_derivative(smooth_activation, name):
    rng = np.random.default_rng(7)
    g = build_arrangement(name, 3, 24, 40, seed=3).astype(np.float64)
    _randomize_bn(g, rng)
    x = rng.uniform(-1, 1, (2, 24, 40, 3))
    upstream = rng.standard_normal((2, 24, 40, 3))
    (_,), tape = R.execute(g, x, record=True)
    wgrads, xgrad = R.backward(g, tape, [upstream])

    def loss(weights, inp):
        g.weights = weights
        return float(np.sum(R.execute(g, inp)[0][0] * upstream))

    base = dict(g.weights)
    # perturb each tensor on its own scale so the probe stays in the linear regime
    direction = {k: rng.standard_normal(v.shape) * max(float(np.std(v)), 0.05) for k, v in base.items() if k in wgrads}
    dx = rng.standard_normal(x.shape)
    eps = 1e-5
    plus = {k: v + eps * direction.get(k, 0) for k, v in base.items()}
    minus = {k: v - eps * direction.get(k, 0) for k, v in base.items()}
    numeric = (loss(plus, x + eps * dx) - loss(minus, x - eps * dx)) / (2 * eps)
    analytic = sum(float(np.sum(wgrads[k] * d)) for k, d in direction.items()) + float(np.sum(xgrad * dx))
    g.weights = base
    assert abs(analytic - numeric) / abs(numeric) < 1e-5


def test_training_mode_gradient_on_small_graph(smooth_activation):
    rng = np.random.default_rng(11)
    g = build_arrangement("CM4", 2, 32, 32, seed=2).astype(np.float64)
    x = rng.uniform(-1, 1, (4, 32, 32, 3))
    upstream = rng.standard_normal((4, 32, 32, 2))
    (_,), tape = R.execute(g, x, training=True, record=True)
    wgrads, _ = R.backward(g, tape, [upstream])
    name = "decoder/logits/weight"
    d = rng.standard_normal(g.weights[name].shape)
    w0 = g.weights[name]
    eps = 1e-6

    def loss(w):
        g.weights[name] = w
        return float(np.sum(R.execute(g, x, training=True)[0][0] * upstream))

    numeric = (loss(w0 + eps * d) - loss(w0 - eps * d)) / (2 * eps)
    g.weights[name] = w0
    assert np.sum(wgrads[name] * d) == pytest.approx(numeric, rel=1e-6)


def test_threaded_forward_matches_serial():
    # float64 so that chunk-size dependent BLAS rounding cannot hide a real difference
    g = build_arrangement("CM3", 3, 32, 48, seed=1).astype(np.float64)
    x = np.random.default_rng(0).uniform(-1, 1, (4, 32, 48, 3))
    np.testing.assert_allclose(R.forward(g, x, threads=3), R.forward(g, x, threads=0), atol=1e-10)


def test_forward_is_deterministic():
    g = build_arrangement("CM5", 3, 32, 48)
    x = np.random.default_rng(0).uniform(-1, 1, (2, 32, 48, 3)).astype(np.float32)
    np.testing.assert_array_equal(R.forward(g, x), R.forward(g, x))


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.setenv("CMSNET_THREADS", "3")
    assert R.thread_count() == 3
    monkeypatch.setenv("CMSNET_THREADS", "many")
    with pytest.raises(ConfigError):
        R.thread_count()


def test_input_shape_checked():
    g = build_arrangement("CM3", 2, 32, 48)
    with pytest.raises(ConfigError):
        R.forward(g, np.zeros((1, 48, 32, 3), np.float32))


def test_argmax_ties_resolve_to_lowest_class():
    logits = np.zeros((1, 2, 2, 3))
    assert not R.argmax_mask(logits).any()


def test_non_finite_logits_raise():
    with pytest.raises(NumericError):
        R.argmax_mask(np.full((1, 1, 1, 2), np.nan))


def test_preprocess_range():
    img = np.array([[[0, 127.5, 255]]], np.float32)
    np.testing.assert_allclose(R.preprocess(img).ravel(), [-1, 0, 1])


def test_running_stats_update_only_in_training():
    g = build_arrangement("CM3", 2, 32, 32)
    x = np.random.default_rng(0).uniform(-1, 1, (2, 32, 32, 3)).astype(np.float32)
    _, tape = R.execute(g, x, training=False, record=True)
    assert R.updated_running_stats(g, tape) == {}
    _, tape = R.execute(g, x, training=True, record=True)
    stats = R.updated_running_stats(g, tape)
    assert len(stats) == 2 * len(g.ops("batch_norm"))
