import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from softpivot import autodiff as ad
from softpivot.autodiff import Tensor, grad_check
from softpivot.softbridge import renormalize


def test_matmul_identity():
    x = np.arange(6.0).reshape(2, 3)
    out = ad.matmul(Tensor(np.eye(2)), Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_matmul_hand_sum():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    b = Tensor(rng.normal(size=(4, 2)))
    ok, err = grad_check(lambda a: ad.tsum(a @ b), rng.normal(size=(3, 4)), eps=1e-5, tol=1e-5)
    assert ok, err
    a = Tensor(rng.normal(size=(3, 4)))
    ok, err = grad_check(lambda b: ad.tsum(a @ b), rng.normal(size=(4, 2)), eps=1e-5, tol=1e-5)
    assert ok, err


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    big = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0, abs=1e-300)
    # direct evaluation of exp(x_i) / sum_j exp(x_j)
    z = sum(math.exp(v) for v in (1, 2, 3))
    expected = [math.exp(v) / z for v in (1, 2, 3)]
    np.testing.assert_allclose(expected, [0.09003, 0.24473, 0.66524], atol=5e-6)
    np.testing.assert_allclose(ad.softmax(Tensor([1.0, 2.0, 3.0])).data, expected, rtol=1e-12)


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
                  elements=st.floats(-1e300, 1e300, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    y = ad.softmax(Tensor(x), axis=-1).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)


def test_cross_entropy_examples():
    forced = Tensor([[1000.0, 0.0, 0.0]])
    assert ad.cross_entropy(forced, [0], 0.0, pad_id=None).item() == 0.0
    uniform = Tensor(np.zeros((1, 4)))
    assert ad.cross_entropy(uniform, [2], 0.0, pad_id=None).item() == pytest.approx(math.log(4), abs=1e-12)
    assert ad.cross_entropy(Tensor(np.ones((3, 4))), [0, 0, 0], 0.1, pad_id=0).item() == 0.0


def test_cross_entropy_sums_over_positions_and_skips_pad():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(5, 6))
    targets = np.array([3, 4, 0, 5, 0])
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    expected = -sum(logp[i, t] for i, t in enumerate(targets) if t != 0)
    assert ad.cross_entropy(Tensor(logits), targets, 0.0).item() == pytest.approx(expected, rel=1e-12)
    assert ad.nonpad_count(targets) == 3


def test_cross_entropy_rejects_out_of_vocab():
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor(np.zeros((2, 4))), [1, 4])


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_backward_accumulates_across_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = ad.tsum(x * x)
    loss.backward()
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * 2 * x.data)


def test_shared_subexpression_sums_paths():
    x = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    h = ad.exp(x)
    loss = ad.tsum(h * h + h)  # d/dx = 2 e^{2x} + e^x
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * np.exp(2 * x.data) + np.exp(x.data), rtol=1e-12)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_broadcast_is_restricted():
    ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))  # bias
    ad.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))  # row-wise
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 1, 1))))


def test_grad_check_sum_is_exact():
    ok, err = grad_check(ad.tsum, np.random.default_rng(0).normal(size=(3, 2)), eps=1e-5, tol=1e-4)
    assert ok and err < 1e-9


def test_grad_check_softmax_weighted():
    w = Tensor(np.random.default_rng(1).normal(size=(2, 5)))
    ok, err = grad_check(lambda x: ad.tsum(ad.softmax(x) * w), np.random.default_rng(2).normal(size=(2, 5)),
                         eps=1e-5, tol=1e-4)
    assert ok, err


def test_grad_check_renormalize_alpha_two():
    w = Tensor(np.random.default_rng(3).normal(size=(3, 6)))

    def f(x):
        return ad.tsum(renormalize(ad.softmax(x), 2.0) * w)

    ok, err = grad_check(f, np.random.default_rng(4).normal(size=(3, 6)), eps=1e-5, tol=1e-4)
    assert ok, err


def _op_cases():
    def weighted(fn, shape_out):
        def wrap(x, rng):
            w = Tensor(rng.normal(size=shape_out))
            return lambda t: ad.tsum(fn(t) * w)
        return wrap

    gamma = lambda rng: Tensor(rng.normal(size=5))  # noqa: E731
    return {
        "matmul_batched": ((2, 3, 4), lambda x, rng: (lambda b: lambda t: ad.tsum((t @ b) * (t @ b)))(Tensor(rng.normal(size=(4, 3))))),
        "softmax": ((3, 5), weighted(ad.softmax, (3, 5))),
        "softmax_masked": ((2, 4), weighted(lambda t: ad.softmax(t, mask=np.array([[1, 1, 0, 1], [1, 0, 1, 1]], bool)), (2, 4))),
        "log_softmax": ((3, 5), weighted(ad.log_softmax, (3, 5))),
        "layer_norm": ((4, 5), lambda x, rng: (lambda g, b, w: lambda t: ad.tsum(ad.layer_norm(t, g, b) * w))(gamma(rng), gamma(rng), Tensor(rng.normal(size=(4, 5))))),
        "cross_entropy": ((4, 6), lambda x, rng: (lambda y: lambda t: ad.cross_entropy(t, y, 0.1))(np.array([4, 0, 5, 1]))),
        "mul": ((3, 4), weighted(lambda t: t * t, (3, 4))),
        "div": ((3, 4), weighted(lambda t: t / (ad.exp(t) + 1.0), (3, 4))),
        "exp_log": ((3, 4), weighted(lambda t: ad.log(ad.exp(t) + 2.0), (3, 4))),
        "power": ((3, 4), weighted(lambda t: ad.power(ad.exp(t), 1.7), (3, 4))),
        "relu": ((3, 4), weighted(ad.relu, (3, 4))),
        "reshape_transpose": ((2, 6), weighted(lambda t: ad.transpose(ad.reshape(t, (2, 3, 2)), (2, 0, 1)), (2, 2, 3))),
        "getitem": ((4, 3), weighted(lambda t: t[np.array([0, 2, 2])], (3, 3))),
        "embedding": ((5, 3), weighted(lambda t: ad.embedding(t, np.array([[1, 4], [1, 0]])), (2, 2, 3))),
        "sum_axis": ((3, 4), weighted(lambda t: ad.tsum(t, axis=0), (4,))),
        "renormalize_half": ((2, 5), weighted(lambda t: renormalize(ad.softmax(t), 0.5), (2, 5))),
    }


CASES = _op_cases()


@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", range(20))
def test_every_op_passes_grad_check(name, seed):
    shape, build = CASES[name]
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    if name == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
    ok, err = grad_check(build(x, rng), x, eps=1e-5, tol=1e-4)
    assert ok, f"{name} seed {seed}: max rel err {err}"
