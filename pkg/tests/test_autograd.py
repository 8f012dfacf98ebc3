import numpy as np
import pytest

from latte import autograd as ag
from latte.autograd import NonFiniteError, Parameter, Tensor
from latte.geometry import expmap0, geodesic_distance, lift_to_manifold, origin, squared_lorentz_distance
from latte.optim import AdamW, ParamGroup, grad_check


def test_half_square_norm():
    p = Parameter(np.array([1.0, -2.0, 3.0]))
    ag.backward((ag.square(p) * 0.5).sum())
    np.testing.assert_array_equal(p.grad, p.data)


def test_squared_distance_of_lift_to_origin():
    rep = grad_check(lambda p: squared_lorentz_distance(lift_to_manifold(p), origin(3)), [np.array([0.3, -0.8, 1.1])])
    assert rep.passed, rep


def test_frozen_grad_stays_zero():
    w = Parameter(np.ones(3), trainable=False)
    p = Parameter(np.ones(3))
    ag.backward((w * p).sum())
    assert not np.any(w.grad)
    np.testing.assert_array_equal(p.grad, np.ones(3))


def test_unreachable_has_zero_grad():
    a, b = Parameter(np.ones(2)), Parameter(np.ones(2))
    b.grad[:] = 5.0
    ag.backward(a.sum())
    np.testing.assert_array_equal(a.grad, 1.0)


def test_grads_accumulate_through_shared_nodes():
    p = Parameter(np.array([2.0]))
    y = p * p + p
    ag.backward(y.sum())
    assert p.grad[0] == pytest.approx(5.0)


def test_non_finite_names_first_bad_node():
    p = Parameter(np.array([-1.0, 4.0]), name="p")
    with pytest.raises(NonFiniteError, match="sqrt"):
        ag.backward(ag.sqrt(p).sum() * 2.0)


def test_non_scalar_loss_rejected():
    with pytest.raises(ValueError):
        ag.backward(Parameter(np.ones(3)) * 2.0)


def test_no_grad_records_nothing():
    p = Parameter(np.ones(2))
    with ag.no_grad():
        y = p * 3.0
    assert not y.requires_grad
    assert ag.grad_enabled()


OPS = {
    "exp": lambda a: ag.exp(a),
    "log": lambda a: ag.log(ag.square(a) + 1.0),
    "softplus": ag.softplus,
    "cosh": ag.cosh,
    "sinh": ag.sinh,
    "div": lambda a: a / (ag.square(a) + 2.0),
    "power": lambda a: ag.power(ag.square(a) + 1.0, 1.5),
    "logsumexp": lambda a: ag.logsumexp(a.reshape(2, 3), axis=-1),
    "softmax": lambda a: ag.softmax(a.reshape(3, 2), axis=0),
    "mean": lambda a: a.reshape(2, 3).mean(axis=0),
    "transpose": lambda a: ag.transpose(a.reshape(2, 3), (1, 0)) * np.arange(6).reshape(3, 2),
    "getitem_adv": lambda a: a[np.array([0, 0, 3, 5])],
    "concat": lambda a: ag.concat([a[:2], ag.square(a[2:])]),
    "stack": lambda a: ag.stack([a[:3], a[3:] * 2.0]),
    "pad": lambda a: ag.pad_last(a.reshape(2, 3), 1, 2) * np.arange(12).reshape(2, 6),
    "maximum": lambda a: ag.maximum(a, a * 0.5 + 0.05),
    "relu": lambda a: ag.relu(a + 0.05),
    "abs": lambda a: ag.tabs(a + 0.05),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_elementwise_grads(name):
    x = np.array([0.3, -0.7, 1.2, 0.45, -1.6, 0.9])
    assert grad_check(OPS[name], [x]).passed


def test_matmul_broadcast_grad(rng):
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((4, 5))
    assert grad_check(lambda x, y: ag.matmul(x, y), [a, b]).passed


def test_smooth_primitives_through_series_cutoff():
    s = np.array([1e-6, 5e-4, 2e-3, 0.5, 3.0])
    for fn in (ag.cosh_sqrt, ag.sinhc_sqrt):
        assert grad_check(fn, [s], h=1e-7).passed
    beta = np.array([1.0 + 1e-6, 1.0005, 1.002, 1.5, 4.0])
    assert grad_check(ag.acosh_ratio, [beta], h=1e-7).passed


def test_clamped_acosh_zero_grad_inside_clamp():
    p = Parameter(np.array([0.5, 2.0]))
    ag.backward(ag.acosh_clamped(p).sum())
    assert p.grad[0] == 0.0
    assert p.grad[1] == pytest.approx(1 / np.sqrt(3.0))


def test_unfold_grads(rng):
    x = rng.standard_normal((2, 3, 9))
    assert grad_check(lambda a: ag.unfold1d(a, 3, padding=1, dilation=2), [x]).passed
    y = rng.standard_normal((1, 2, 5, 6))
    assert grad_check(lambda a: ag.unfold2d(a, 3, 5, 1, 2), [y]).passed


def test_unfold_span_too_long():
    with pytest.raises(ValueError):
        ag.unfold1d(Tensor(np.zeros((1, 1, 4))), 7)


def test_take_rows_grad(rng):
    x = rng.standard_normal((2, 5, 3))
    idx = np.array([[0, 0, 4], [2, 1, 2]])
    assert grad_check(lambda a: ag.take_rows(a, idx), [x]).passed


def test_exp_then_distance_grad(rng):
    v = rng.standard_normal(3) * 0.5
    w = rng.standard_normal(3) * 0.5
    rep = grad_check(lambda a, b: geodesic_distance(expmap0(a), expmap0(b)), [v, w])
    assert rep.passed, rep


def test_grad_check_linear_is_exact(rng):
    A = rng.standard_normal((3, 4))
    rep = grad_check(lambda x: ag.matmul(Tensor(A), x), [rng.standard_normal((4, 2))])
    assert rep.max_rel_error < 1e-8


def test_grad_check_catches_corrupt_gradient():
    def bad(a):
        out = ag.square(a)
        return ag.make_op(out.data, [a], lambda g: (g * 3.0 * a.data,), "corrupt")

    assert not grad_check(bad, [np.array([0.5, 1.5])]).passed


class TestAdamW:
    def test_zero_grad_no_decay_unchanged(self):
        p = Parameter(np.array([1.5, -2.0]))
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_descends_half_square(self):
        p = Parameter(np.array([1.0]))
        opt = AdamW([p], lr=0.1)
        ag.backward((ag.square(p) * 0.5).sum())
        opt.step()
        assert p.data[0] < 1.0

    def test_matches_reference_formula(self):
        p = Parameter(np.array([0.5, -1.0]))
        opt = AdamW([p], lr=0.01, weight_decay=0.1)
        ref = p.data.copy()
        m = v = np.zeros(2)
        for t in range(1, 4):
            g = np.array([0.3, -0.2]) * t
            p.grad[:] = g
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref * (1 - 0.01 * 0.1) - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=1e-14)

    def test_frozen_untouched(self):
        p = Parameter(np.array([1.0]), trainable=False)
        p.grad[:] = 1.0
        opt = AdamW([p], lr=1.0, weight_decay=1.0)
        opt.step()
        assert p.data[0] == 1.0

    def test_groups_have_own_lr(self):
        a, b = Parameter(np.array([1.0])), Parameter(np.array([1.0]))
        a.grad[:] = b.grad[:] = 1.0
        AdamW([ParamGroup([a], 0.1), ParamGroup([b], 0.0)]).step()
        assert a.data[0] < 1.0 and b.data[0] == 1.0

    def test_deterministic(self):
        def run():
            p = Parameter(np.random.default_rng(3).standard_normal(4))
            opt = AdamW([p], lr=0.05, weight_decay=0.01)
            for _ in range(10):
                opt.zero_grad()
                ag.backward(ag.square(ag.cosh(p)).sum())
                opt.step()
            return p.data

        np.testing.assert_array_equal(run(), run())
