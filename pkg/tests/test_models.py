import numpy as np
import pytest

from eqlearn import tensor as T
from eqlearn.models import (
    Model,
    ModelSpec,
    forward_expr,
    init_params,
    l2_penalty,
    load_checkpoint,
    predict,
    save_checkpoint,
)


def test_logistic_at_zero_weights_outputs_half():
    spec = ModelSpec("logistic", (3, 1))
    m = init_params(spec, seed=0)
    x = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(predict(m, x), np.full(5, 0.5))


def test_linear_model_is_linear():
    spec = ModelSpec("linear", (2, 1))
    m = Model(spec, np.array([1.0, 0.0, 0.0]))  # w=(1,0), b=0
    assert predict(m, np.array([1.0, 2.0])) == 1.0
    m2 = Model(spec, np.array([2.0, 3.0, 0.5]))
    assert predict(m2, np.array([1.0, 2.0])) == 2.0 + 6.0 + 0.5


def test_mlp_zero_final_layer_outputs_bias():
    spec = ModelSpec("mlp", (2, 4, 1))
    m = init_params(spec, seed=1)
    theta = np.array(m.theta)
    shapes = dict(spec.param_shapes())
    # zero the last weight matrix, set final bias to 0.7
    pos = 0
    for name, shape in spec.param_shapes():
        n = int(np.prod(shape))
        if name == "w1":
            theta[pos : pos + n] = 0.0
        if name == "b1":
            theta[pos : pos + n] = 0.7
        pos += n
    m = m.with_theta(theta)
    out = predict(m, np.random.default_rng(2).normal(size=(6, 2)))
    np.testing.assert_allclose(out, np.full(6, 0.7), rtol=0, atol=0)


def test_init_is_deterministic_and_bounded():
    spec = ModelSpec("mlp", (3, 8, 1))
    a = init_params(spec, seed=42)
    b = init_params(spec, seed=42)
    np.testing.assert_array_equal(a.theta, b.theta)
    binds = a.param_bindings()
    assert np.all(np.abs(binds["w0"]) <= 1.0 / np.sqrt(3))
    assert np.all(np.abs(binds["w1"]) <= 1.0 / np.sqrt(8))
    np.testing.assert_array_equal(binds["b0"], 0.0)


def test_logistic_init_is_zero():
    m = init_params(ModelSpec("logistic", (4, 1)), seed=9)
    np.testing.assert_array_equal(m.theta, 0.0)


def test_param_roundtrip_keeps_predictions():
    spec = ModelSpec("mlp", (2, 6, 6, 1))
    m = init_params(spec, seed=3)
    x = np.random.default_rng(4).normal(size=(7, 2))
    before = predict(m, x)
    after = predict(m.with_theta(np.array(m.theta)), x)
    np.testing.assert_array_equal(before, after)


def test_batch_equals_per_row_prediction():
    spec = ModelSpec("mlp", (3, 5, 1))
    m = init_params(spec, seed=5)
    x = np.random.default_rng(6).normal(size=(8, 3))
    batch = predict(m, x)
    rows = np.array([predict(m, x[i]) for i in range(8)])
    np.testing.assert_array_equal(batch, rows)


def test_logistic_monotone_in_preactivation():
    spec = ModelSpec("logistic", (1, 1))
    m = Model(spec, np.array([1.0, 0.0]))
    xs = np.linspace(-4, 4, 21)[:, None]
    out = predict(m, xs)
    assert np.all(np.diff(out) > 0)
    assert np.all((out > 0) & (out < 1))


def test_l2_penalty_values_and_gradient():
    spec = ModelSpec("linear", (2, 1))
    m = Model(spec, np.array([1.0, 2.0, 0.0]))
    zero = l2_penalty(spec, 0.0)
    assert T.evaluate(zero, m.param_bindings()) == 0.0
    pen = l2_penalty(spec, 2.0)
    assert T.evaluate(pen, m.param_bindings()) == 5.0
    g = T.grad_params(pen, m.param_bindings(), params=spec.param_names())
    np.testing.assert_allclose(g, 2.0 * m.theta)
    assert T.finite_diff_check(pen, m.param_bindings()) < 1e-8


def test_forward_expr_gradient_matches_fd():
    spec = ModelSpec("mlp", (2, 4, 1))
    m = init_params(spec, seed=7)
    x = np.random.default_rng(8).normal(size=(5, 2))
    y = np.random.default_rng(9).normal(size=(5,))
    loss = T.mean(T.square(forward_expr(spec, T.const(x)) - T.const(y)))
    assert T.finite_diff_check(loss, m.param_bindings(), h=1e-5) < 1e-5


def test_predict_agrees_with_graph_forward():
    spec = ModelSpec("mlp", (2, 8, 8, 1), output_squash="sigmoid")
    m = init_params(spec, seed=12)
    x = np.random.default_rng(13).normal(size=(50, 2))
    expr = forward_expr(spec, T.const(x))
    graph_out = T.evaluate(expr, m.param_bindings())
    np.testing.assert_allclose(predict(m, x), graph_out, rtol=1e-13, atol=1e-15)


def test_checkpoint_roundtrip(tmp_path):
    spec = ModelSpec("mlp", (2, 3, 2), output_squash="none")
    m = init_params(spec, seed=11)
    prefix = str(tmp_path / "ckpt")
    save_checkpoint(m, prefix)
    back = load_checkpoint(prefix)
    assert back.spec == spec
    np.testing.assert_array_equal(back.theta, m.theta)


def test_bad_specs_rejected():
    with pytest.raises(ValueError):
        ModelSpec("mlp", ())
    with pytest.raises(ValueError):
        ModelSpec("linear", (2, 3, 1))
    with pytest.raises(ValueError):
        Model(ModelSpec("linear", (2, 1)), np.zeros(5))
    with pytest.raises(ValueError):
        predict(init_params(ModelSpec("linear", (2, 1)), 0), np.zeros((3, 4)))
