import math

import numpy as np
import pytest

from ahgs import autodiff as ad
from ahgs.autodiff import (
    ContractError,
    DomainError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    finite_difference_check,
    forward_op,
)


def test_scalar_product():
    out = ad.mul(Tensor([2.0]), Tensor([3.0]))
    assert out.data.tolist() == [6.0]


def test_sigmoid_symmetry_point():
    assert ad.sigmoid(Tensor([0.0])).data.tolist() == [0.5]


def test_matmul_ones():
    # hand expansion: each entry is a row.column sum of three 1*1 products
    out = ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    assert np.array_equal(out.data, np.full((2, 2), 3.0))


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(ad.mul(x, x))
        backward(loss, tape)
    assert np.allclose(x.grad, [6.0])


def test_backward_x_sin_x_matches_central_difference():
    # independent oracle: central finite difference with h = 1e-6
    h = 1e-6
    f = lambda v: v * math.sin(v)
    expected = (f(1.0 + h) - f(1.0 - h)) / (2 * h)
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(ad.mul(x, ad.sin(x)))
        backward(loss, tape)
    assert abs(x.grad[0] - expected) < 1e-8
    assert abs(x.grad[0] - 1.38177) < 1e-4


def test_backward_linear_sigmoid_matches_fd():
    rng = np.random.default_rng(7)
    wdata = rng.normal(size=(4, 3))
    xdata = rng.normal(size=(3,))

    def f(w):
        return ad.tsum(ad.sigmoid(ad.matmul(w, Tensor(xdata))))

    report = finite_difference_check(f, Tensor(wdata), h=1e-6, rel_tol=1e-5)
    assert report.passed, report


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
        with pytest.raises(ContractError):
            backward(y, tape)


def test_fd_check_sum_of_squares():
    f = lambda t: ad.tsum(ad.mul(t, t))
    report = finite_difference_check(f, Tensor([1.0, -2.0, 3.0]), h=1e-6, rel_tol=1e-5)
    assert report.passed
    assert bool(report) is True


def test_fd_check_detects_wrong_backward_rule():
    # negative control: an op whose backward rule is deliberately wrong
    def broken_square(t):
        out = Tensor(t.data * t.data)
        return ad._record(out, (t,), lambda g: (g * 3.0 * t.data,))

    f = lambda t: ad.tsum(broken_square(t))
    report = finite_difference_check(f, Tensor([1.0, 2.0]), h=1e-6, rel_tol=1e-5)
    assert not report.passed
    assert report.max_rel_error > 0.1


def test_fd_check_nonfinite_f_is_domain_error():
    def f(t):
        return ad.tsum(ad.div(Tensor([1.0]), ad.tsum(t, keepdims=True) * 0.0 + t))

    with pytest.raises(DomainError):
        finite_difference_check(f, Tensor([0.0]))


# ---------------------------------------------------------------------------
# gradient correctness for every op-kind against central differences


def _rand(shape, rng, low=-1.5, high=1.5):
    return rng.uniform(low, high, size=shape)


OP_CASES = {
    "add": lambda t, rng: ad.add(t, Tensor(_rand(t.shape, rng))),
    "sub": lambda t, rng: ad.sub(Tensor(_rand(t.shape, rng)), t),
    "mul": lambda t, rng: ad.mul(t, Tensor(_rand(t.shape, rng))),
    "div": lambda t, rng: ad.div(t, Tensor(_rand(t.shape, rng, 0.5, 2.0))),
    "matmul": lambda t, rng: ad.matmul(t, Tensor(_rand((t.shape[-1], 2), rng))),
    "sum": lambda t, rng: ad.tsum(t, axis=0),
    "mean": lambda t, rng: ad.tmean(t, axis=-1),
    "exp": lambda t, rng: ad.exp(t),
    "log": lambda t, rng: ad.log(ad.add(ad.mul(t, t), 0.5)),
    "sin": lambda t, rng: ad.sin(t),
    "cos": lambda t, rng: ad.cos(t),
    "sqrt": lambda t, rng: ad.sqrt(ad.add(ad.mul(t, t), 0.25)),
    "relu": lambda t, rng: ad.relu(t),
    "sigmoid": lambda t, rng: ad.sigmoid(t),
    "tanh": lambda t, rng: ad.tanh(t),
    "softplus": lambda t, rng: ad.softplus(t),
    "concat": lambda t, rng: ad.concat([t, ad.mul(t, 2.0)], axis=0),
    "slice": lambda t, rng: t[1:, :2],
    "reshape": lambda t, rng: ad.reshape(t, (-1,)),
    "broadcast": lambda t, rng: ad.broadcast_to(ad.reshape(t, (1,) + t.shape), (3,) + t.shape),
    "power": lambda t, rng: ad.power(ad.add(ad.mul(t, t), 0.3), 1.7),
    "max": lambda t, rng: ad.maximum(t, Tensor(_rand(t.shape, rng))),
    "normalize-vector": lambda t, rng: ad.normalize(t, axis=-1),
}


@pytest.mark.parametrize("kind", sorted(OP_CASES))
def test_op_gradient_matches_fd(kind):
    rng = np.random.default_rng(hash(kind) % (2**32))
    t0 = Tensor(_rand((3, 4), rng))
    build = OP_CASES[kind]

    def f(t):
        out = build(t, np.random.default_rng(hash(kind) % (2**32) + 1))
        w = Tensor(_rand(out.shape, np.random.default_rng(5)))
        return ad.tsum(ad.mul(out, w))

    report = finite_difference_check(f, t0, h=1e-6, rel_tol=1e-5)
    assert report.passed, (kind, report)


def test_conv2d_gradients_match_fd():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(2, 5, 6)))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    b = Tensor(rng.normal(size=(3,)))
    probe_w = Tensor(rng.normal(size=(3, 5, 6)))

    def loss_x(t):
        return ad.tsum(ad.mul(ad.conv2d(t, w, b), probe_w))

    def loss_w(t):
        return ad.tsum(ad.mul(ad.conv2d(x, t, b), probe_w))

    def loss_b(t):
        return ad.tsum(ad.mul(ad.conv2d(x, w, t), probe_w))

    assert finite_difference_check(loss_x, x, rel_tol=1e-5).passed
    assert finite_difference_check(loss_w, w, rel_tol=1e-5).passed
    assert finite_difference_check(loss_b, b, rel_tol=1e-5).passed


def test_avgpool2d_gradient_matches_fd():
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(2, 4, 6)))
    probe = Tensor(rng.normal(size=(2, 2, 3)))

    def f(t):
        return ad.tsum(ad.mul(ad.avgpool2d(t, 2), probe))

    assert finite_difference_check(f, x, rel_tol=1e-5).passed


def test_take_with_integer_array_accumulates_duplicates():
    x = Tensor(np.arange(4.0), requires_grad=True)
    idx = np.array([0, 0, 2])
    with Tape() as tape:
        y = x[idx]
        loss = ad.tsum(y)
        backward(loss, tape)
    assert np.array_equal(x.grad, [2.0, 0.0, 1.0, 0.0])


def test_deep_composition_gradient():
    # > 20 chained ops, checked at the relaxed tolerance
    def f(t):
        out = t
        for i in range(24):
            out = ad.sin(ad.add(ad.mul(out, 0.9), 0.05 * (i % 3)))
        return ad.tsum(out)

    report = finite_difference_check(f, Tensor([0.3, -0.4, 0.8]), h=1e-6, rel_tol=1e-3)
    assert report.passed, report


def test_backward_linearity():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(4,))
    a, b = 2.5, -1.25

    def grad_of(fn):
        x = Tensor(x0.copy(), requires_grad=True)
        with Tape() as tape:
            backward(fn(x), tape)
        return x.grad.copy()

    f = lambda x: ad.tsum(ad.sin(x))
    g = lambda x: ad.tsum(ad.mul(x, x))
    combined = lambda x: ad.add(ad.mul(f(x), a), ad.mul(g(x), b))
    assert np.allclose(grad_of(combined), a * grad_of(f) + b * grad_of(g), rtol=1e-12)


def test_determinism_bit_identical_grads():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
        with Tape() as tape:
            y = ad.tanh(ad.matmul(x, w))
            loss = ad.tmean(ad.mul(y, y))
            backward(loss, tape)
        return x.grad.copy(), w.grad.copy()

    gx1, gw1 = run()
    gx2, gw2 = run()
    assert gx1.tobytes() == gx2.tobytes()
    assert gw1.tobytes() == gw2.tobytes()


def test_forward_op_dispatch_and_unknown_kind():
    out = forward_op("mul", Tensor([2.0]), Tensor([4.0]))
    assert out.data.tolist() == [8.0]
    with pytest.raises(ContractError):
        forward_op("fft", Tensor([1.0]))


def test_shape_and_domain_errors():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DomainError):
        ad.div(Tensor([1.0]), Tensor([0.0]))
    with pytest.raises(DomainError):
        ad.log(Tensor([-1.0]))
    with pytest.raises(DomainError):
        ad.sqrt(Tensor([-0.5]))
    with pytest.raises(DomainError):
        ad.normalize(Tensor([[0.0, 0.0, 0.0]]))


def test_no_tape_means_no_recording():
    x = Tensor([1.0], requires_grad=True)
    y = ad.mul(x, x)
    assert y.requires_grad is False


def test_grad_not_tracked_through_constants():
    c = Tensor([2.0])
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.tsum(ad.mul(c, x))
        backward(loss, tape)
    assert c.grad is None
    assert np.allclose(x.grad, [2.0])


def test_absolute_value_and_subgradient_zero():
    x = Tensor([-2.0, 0.0, 3.0], requires_grad=True)
    with Tape() as tape:
        y = ad.absolute(x)
        loss = ad.tsum(y)
        backward(loss, tape)
    assert np.array_equal(y.data, [2.0, 0.0, 3.0])
    assert np.array_equal(x.grad, [-1.0, 0.0, 1.0])
