import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqsurf import autodiff as ad
from vqsurf.autodiff import Tensor


def rng_for(seed=0):
    return np.random.default_rng(seed)


def test_matmul_matches_triple_loop():
    rng = rng_for(3)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    out = (Tensor(a) @ Tensor(b)).data
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.abs(out - ref).max() < 1e-12


def test_sigmoid_at_zero():
    t = ad.sigmoid(Tensor(0.0))
    assert t.data == 0.5
    x = ad.parameter(0.0)
    ad.tensor_sum(ad.sigmoid(x)).backward()
    assert np.isclose(x.grad, 0.25)


def test_conv2d_ones_interior():
    out = ad.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 3, 3)
    assert np.all(out.data == 9.0)


def test_conv2d_matches_loop_oracle():
    rng = rng_for(11)
    x = rng.normal(size=(2, 6, 7))
    w = rng.normal(size=(3, 2, 3, 3))
    stride, pad = 2, 1
    out = ad.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (6 + 2 * pad - 3) // stride + 1
    wo = (7 + 2 * pad - 3) // stride + 1
    ref = np.zeros((3, ho, wo))
    for o in range(3):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + 3, j * stride:j * stride + 3]
                ref[o, i, j] = (patch * w[o]).sum()
    assert np.abs(out - ref).max() < 1e-12


def test_square_backward():
    x = ad.parameter(3.0)
    ad.tensor_sum(x * x).backward()
    assert np.isclose(x.grad, 6.0)


def test_backward_requires_scalar():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_backward_requires_tape():
    with pytest.raises(ValueError):
        Tensor(1.0).backward()


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"add.*\(2, 3\).*\(4,\)"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_gradient_accumulation_matches_single_expression():
    rng = rng_for(5)
    base = rng.normal(size=4)
    x = ad.parameter(base.copy())
    ad.tensor_sum(x * x + 3.0 * x).backward()
    two_branch = x.grad.copy()
    assert np.allclose(two_branch, 2.0 * base + 3.0)


def test_forward_determinism():
    rng = rng_for(9)
    x = rng.normal(size=(4, 4))

    def run():
        t = ad.parameter(x.copy())
        y = ad.tensor_sum(ad.sigmoid(t @ Tensor(x)) * ad.softplus(t, beta=3.0))
        y.backward()
        return y.data.copy(), t.grad.copy()

    y1, g1 = run()
    y2, g2 = run()
    assert np.array_equal(y1, y2) and np.array_equal(g1, g2)


def test_no_grad_suspends_tape():
    x = ad.parameter(np.ones(3))
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    with pytest.raises(ValueError):
        ad.tensor_sum(y).backward()


def test_log_rejects_nonpositive():
    with pytest.raises(FloatingPointError):
        ad.log(Tensor(np.array([1.0, 0.0])))


def test_exp_rejects_overflow():
    with pytest.raises(FloatingPointError):
        ad.exp(Tensor(1000.0))


# -- gradient checks for every registered op -------------------------------

def _away_from_kinks(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.1, x + 0.2 * np.sign(x) + 0.05, x)


GRADCHECK_CASES = {
    "add": lambda r, c: ad.tensor_sum(ad.add(c, Tensor(r.normal(size=(3, 1)))) * c),
    "sub": lambda r, c: ad.tensor_sum(ad.sub(c, Tensor(r.normal(size=(3, 4)))) * c),
    "mul": lambda r, c: ad.tensor_sum(ad.mul(c, Tensor(r.normal(size=(3, 4)))) * c),
    "div": lambda r, c: ad.tensor_sum(ad.div(c, Tensor(r.normal(size=(3, 4)) + 3.0))),
    "neg": lambda r, c: ad.tensor_sum(ad.neg(c) * c),
    "matmul": lambda r, c: ad.tensor_sum(ad.sigmoid(c @ Tensor(r.normal(size=(4, 5))))),
    "conv2d": lambda r, c: ad.tensor_sum(ad.sigmoid(
        ad.conv2d(c.reshape(2, 3, 2), Tensor(r.normal(size=(3, 2, 2, 2))),
                  bias=Tensor(r.normal(size=3)), stride=1, pad=1))),
    "conv2d_transpose": lambda r, c: ad.tensor_sum(ad.sigmoid(
        ad.conv2d_transpose(c.reshape(2, 3, 2), Tensor(r.normal(size=(2, 2, 4, 4))),
                            bias=Tensor(r.normal(size=2)), stride=2, pad=1))),
    "sigmoid": lambda r, c: ad.tensor_sum(ad.sigmoid(c) * c),
    "exp": lambda r, c: ad.tensor_sum(ad.exp(c * 0.5)),
    "log": lambda r, c: ad.tensor_sum(ad.log(ad.absolute(c) + 1.5)),
    "softplus": lambda r, c: ad.tensor_sum(ad.softplus(c, beta=4.0)),
    "relu": lambda r, c: ad.tensor_sum(ad.relu(c) * c),
    "sqrt": lambda r, c: ad.tensor_sum(ad.sqrt(ad.absolute(c) + 1.0)),
    "absolute": lambda r, c: ad.tensor_sum(ad.absolute(c)),
    "sin": lambda r, c: ad.tensor_sum(ad.sin(c) * c),
    "cos": lambda r, c: ad.tensor_sum(ad.cos(c) * c),
    "sum": lambda r, c: ad.tensor_sum(ad.sigmoid(ad.tensor_sum(c, axis=1))),
    "mean": lambda r, c: ad.tensor_sum(ad.sigmoid(ad.tensor_mean(c, axis=0))),
    "l1_norm": lambda r, c: ad.l1_norm(c) * 0.5,
    "l2_norm": lambda r, c: ad.tensor_sum(ad.l2_norm(c, axis=-1)),
    "cumsum": lambda r, c: ad.tensor_sum(ad.sigmoid(ad.cumsum(c, axis=1))),
    "concat": lambda r, c: ad.tensor_sum(
        ad.sigmoid(ad.concat([c, c * 2.0], axis=1))),
    "reshape": lambda r, c: ad.tensor_sum(ad.sigmoid(ad.reshape(c, (4, 3)))),
    "transpose": lambda r, c: ad.tensor_sum(ad.sigmoid(ad.transpose(c, (1, 0)))),
    "slice": lambda r, c: ad.tensor_sum(c[1:, ::2] * c[1:, ::2]),
    "take_rows": lambda r, c: ad.tensor_sum(
        ad.sigmoid(ad.take_rows(c, np.array([0, 2, 2, 1])))),
}


def test_gradcheck_covers_every_registered_op():
    assert set(GRADCHECK_CASES) == set(ad.OPS)


@pytest.mark.parametrize("name", sorted(GRADCHECK_CASES))
def test_op_gradcheck(name):
    rng = rng_for(hash(name) % 2 ** 31)
    base = _away_from_kinks(rng, (3, 4))

    def f(c):
        return GRADCHECK_CASES[name](rng_for(hash(name) % 101), c)

    err = ad.grad_check(f, Tensor(base), h=1e-5)
    assert err < 1e-6, f"{name}: gradcheck error {err}"


def test_grad_check_linear_is_exact():
    def f(x):
        return ad.tensor_sum(3.0 * x)

    assert ad.grad_check(f, Tensor(rng_for(1).normal(size=5))) < 1e-10


def test_grad_check_negative_control():
    # an intentionally broken rule (x2 on the gradient) must be caught
    def broken_square(x):
        out = x.data * x.data

        def grad_fn(g):
            return (g * 4.0 * x.data,)  # wrong: the true rule is 2x

        return ad._from_op(out, (x,), grad_fn)

    def f(x):
        return ad.tensor_sum(broken_square(x))

    err = ad.grad_check(f, Tensor(rng_for(2).normal(size=4) + 2.0))
    assert err > 1e-2


def test_grad_check_rejects_nonfinite():
    def f(x):
        return ad.tensor_sum(ad.log(x))

    with pytest.raises(FloatingPointError):
        ad.grad_check(f, Tensor(np.array([1.0, -1.0])))


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=5), st.integers(min_value=1, max_value=5),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_binary_op_values_finite_and_shaped(rows, cols, seed):
    rng = rng_for(seed)
    a = Tensor(rng.normal(size=(rows, cols)))
    b = Tensor(rng.normal(size=(rows, cols)))
    for op in (ad.add, ad.sub, ad.mul):
        out = op(a, b)
        assert out.shape == (rows, cols)
        assert np.isfinite(out.data).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_mul_grad_is_other_operand(seed):
    rng = rng_for(seed)
    a = ad.parameter(rng.normal(size=(2, 3)))
    b = rng.normal(size=(2, 3))
    ad.tensor_sum(a * Tensor(b)).backward()
    assert np.allclose(a.grad, b)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=2, max_value=40), st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_cumsum_matches_numpy(n, seed):
    x = rng_for(seed).normal(size=n)
    assert np.allclose(ad.cumsum(Tensor(x), axis=0).data, np.cumsum(x))
