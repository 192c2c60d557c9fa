import numpy as np
import pytest

from fedpoint.autodiff import Graph, ShapeError, Tensor, check_gradients, relative_error
from fedpoint.gradsuite import model_case, primitive_cases


def _central(f, values, h=1e-5):
    """Plain central differences, written independently of check_gradients."""
    out = {}
    for name, v in values.items():
        grad = np.zeros_like(v)
        for i in np.ndindex(v.shape):
            up = {k: a.copy() for k, a in values.items()}
            dn = {k: a.copy() for k, a in values.items()}
            up[name][i] += h
            dn[name][i] -= h
            grad[i] = (f(up) - f(dn)) / (2 * h)
        out[name] = grad
    return out


def _analytic(build, values):
    g = Graph()
    T = {k: Tensor(v, requires_grad=True, name=k) for k, v in values.items()}
    return g.backward(build(g, T))


def test_linear_identity():
    g = Graph()
    y = g.linear(Tensor([1.0, 2.0, 3.0]), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    assert np.array_equal(y.values, [1.0, 2.0, 3.0])


def test_softmax_symmetric():
    assert np.array_equal(Graph().softmax(Tensor([0.0, 0.0])).values, [0.5, 0.5])


def test_relu_values():
    assert np.array_equal(Graph().relu(Tensor([-1.0, 0.0, 2.0])).values, [0.0, 0.0, 2.0])


def test_square_gradient():
    g = Graph()
    x = Tensor(3.0, requires_grad=True, name="x")
    grads = g.backward(g.mul(x, x))
    assert grads["x"] == pytest.approx(6.0)


def test_dead_relu_gradient():
    g = Graph()
    x = Tensor(-2.0, requires_grad=True, name="x")
    assert g.backward(g.relu(x))["x"] == 0.0


def test_loss_must_be_scalar():
    g = Graph()
    x = Tensor(np.ones(3), requires_grad=True, name="x")
    with pytest.raises(ValueError):
        g.backward(g.relu(x))


def test_shape_error_names_node():
    g = Graph()
    with pytest.raises(ShapeError, match="node 0"):
        g.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_mlp_matches_independent_differences():
    rng = np.random.default_rng(3)
    values = {"x": rng.standard_normal((4, 3)), "w1": rng.standard_normal((3, 5)), "b1": rng.standard_normal(5),
              "w2": rng.standard_normal((5, 2)), "b2": rng.standard_normal(2)}
    proj = rng.standard_normal((4, 2))

    def build(g, T):
        h = g.relu(g.linear(T["x"], T["w1"], T["b1"]))
        return g.sum(g.mul(g.linear(h, T["w2"], T["b2"]), proj))

    def f(vals):
        return build(Graph(record=False), {k: Tensor(v) for k, v in vals.items()}).item()

    analytic = _analytic(build, values)
    numeric = _central(f, values)
    for name in values:
        assert relative_error(analytic[name], numeric[name]).max() < 1e-4, name


def test_linear_layer_tight():
    rng = np.random.default_rng(0)
    values = {"x": rng.standard_normal((3, 4)), "w": rng.standard_normal((4, 2)), "b": rng.standard_normal(2)}
    proj = rng.standard_normal((3, 2))
    rep = check_gradients(lambda g, T: g.sum(g.mul(g.linear(T["x"], T["w"], T["b"]), proj)), values,
                          epsilon=1e-5, tol=1e-6)
    assert rep.passed, str(rep)


def test_batch_norm_training():
    rng = np.random.default_rng(1)
    values = {"x": rng.standard_normal((4, 6, 3)), "gamma": rng.standard_normal(3), "beta": rng.standard_normal(3)}
    proj = rng.standard_normal((4, 6, 3))

    def build(g, T):
        y, _ = g.batch_norm(T["x"], T["gamma"], T["beta"], axes=(0, 1), training=True,
                            running_mean=np.zeros(3), running_var=np.ones(3))
        return g.sum(g.mul(y, proj))

    def f(vals):
        return build(Graph(record=False), {k: Tensor(v) for k, v in vals.items()}).item()

    analytic = _analytic(build, values)
    numeric = _central(f, values)
    for name in values:
        assert relative_error(analytic[name], numeric[name]).max() < 1e-4, name
    assert check_gradients(build, values).passed


@pytest.mark.parametrize("case", primitive_cases(0), ids=lambda c: c.name)
def test_primitive_suite(case):
    rep = check_gradients(case.fn, case.params, max_entries=case.max_entries)
    assert rep.passed, str(rep)


def test_model_gradients_small():
    case = model_case(0, n_points=64, d_in=8, base=8, max_entries=3)
    rep = check_gradients(case.fn, case.params, max_entries=case.max_entries, rng=np.random.default_rng(0))
    assert rep.passed, str(rep)
    assert sum(rep.checked.values()) > sum(rep.skipped.values())


def test_check_gradients_flags_missing_path():
    values = {"x": np.array([1.0, 2.0])}
    assert check_gradients(lambda g, T: g.sum(g.mul(T["x"], T["x"])), values).passed
    # the second factor is detached, so backward sees only half the gradient
    bad = check_gradients(lambda g, T: g.sum(g.mul(T["x"], Tensor(T["x"].values))), values)
    assert not bad.passed


def test_kink_entries_are_skipped():
    # relu exactly at its kink: every step straddles the branch change
    rep = check_gradients(lambda g, T: g.sum(g.relu(T["x"])), {"x": np.zeros(3)})
    assert rep.skipped["x"] == 3
    assert rep.passed


def test_forward_is_pure():
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((5, 3)), rng.standard_normal((3, 4))
    a = Graph().softmax(Graph().linear(Tensor(x), Tensor(w))).values
    b = Graph().softmax(Graph().linear(Tensor(x), Tensor(w))).values
    assert a.tobytes() == b.tobytes()
