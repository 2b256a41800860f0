import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mspharm import _backend
from mspharm.gradcheck import check_gradients
from mspharm.tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    backward,
    check_finite,
    concat,
    conv3d,
    linear_blend,
    mse_loss,
    relu,
    scale,
    transposed_conv3d,
)


def direct_conv(x, w, b, stride, pad):
    """Six-nested-loop reference (plus the output loops)."""
    cin, X, Y, Z = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.zeros((cin, X + 2 * pad, Y + 2 * pad, Z + 2 * pad))
    xp[:, pad:pad + X, pad:pad + Y, pad:pad + Z] = x
    dims = [(d + 2 * pad - k) // stride + 1 for d in (X, Y, Z)]
    out = np.zeros([cout] + dims)
    for co in range(cout):
        for ox in range(dims[0]):
            for oy in range(dims[1]):
                for oz in range(dims[2]):
                    acc = b[co]
                    for ci in range(cin):
                        for kz in range(k):
                            for ky in range(k):
                                for kx in range(k):
                                    acc += w[co, ci, kx, ky, kz] * xp[ci, ox * stride + kx, oy * stride + ky, oz * stride + kz]
                    out[co, ox, oy, oz] = acc
    return out


def conv_matrix(cin, dims, w, stride, pad):
    """Materialize conv3d (no bias) as a dense matrix by probing basis vectors."""
    n_in = cin * int(np.prod(dims))
    zero_b = Tensor(np.zeros(w.shape[0]), dtype=np.float64)
    wt = Tensor(w, dtype=np.float64)
    cols = []
    for i in range(n_in):
        e = np.zeros(n_in)
        e[i] = 1.0
        cols.append(conv3d(Tensor(e.reshape(cin, *dims), dtype=np.float64), wt, zero_b, stride, pad).data.ravel())
    return np.stack(cols, axis=1)


def matching_extent(d, stride, pad, k=3):
    """Smallest extent >= d whose conv output maps back to exactly d under the transpose."""
    while (d + 2 * pad - k) % stride:
        d += 1
    return d


def t64(a, grad=False):
    return Tensor(a, requires_grad=grad, dtype=np.float64)


# -- conv3d -----------------------------------------------------------------

def test_conv3d_sum_of_ones():
    out = conv3d(Tensor(np.ones((1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 27.0


def test_conv3d_dirac_kernel_is_identity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 4, 5, 6)).astype(np.float32)
    w = np.zeros((2, 2, 3, 3, 3), np.float32)
    w[0, 0, 1, 1, 1] = w[1, 1, 1, 1, 1] = 1
    out = conv3d(Tensor(x), Tensor(w), Tensor(np.zeros(2)), stride=1, pad=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv3d_matches_nested_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    got = conv3d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    ref = direct_conv(x, w, b, 2, 1)
    assert got.shape == ref.shape == (3, 3, 3, 3)
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-5)


def test_conv3d_batched_equals_unbatched():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 2, 4, 4, 4)).astype(np.float32)
    w, b = Tensor(rng.normal(size=(2, 2, 3, 3, 3))), Tensor(rng.normal(size=2))
    batched = conv3d(Tensor(x), w, b, 1, 1).data
    for i in range(3):
        np.testing.assert_array_equal(batched[i], conv3d(Tensor(x[i]), w, b, 1, 1).data)


def test_conv3d_errors():
    with pytest.raises(ShapeError):
        conv3d(Tensor(np.ones((2, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeError):
        conv3d(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.zeros(1)))


# -- transposed conv --------------------------------------------------------

def test_transposed_output_extent_11_to_19():
    w = Tensor(np.zeros((1, 1, 3, 3, 3)))
    out = transposed_conv3d(Tensor(np.zeros((1, 11, 11, 11))), w, Tensor(np.zeros(1)), stride=2, pad=2)
    assert out.shape == (1, 19, 19, 19)


def test_transposed_single_tap_spread():
    out = transposed_conv3d(Tensor(np.full((1, 1, 1, 1), 2.5)), Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, np.full((1, 3, 3, 3), 2.5, np.float32))


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 2)])
def test_transposed_equals_conv_matrix_transpose(stride, pad):
    rng = np.random.default_rng(3)
    cin_conv, cout_conv = 2, 3
    w = rng.normal(size=(cout_conv, cin_conv, 3, 3, 3))
    dims = tuple(matching_extent(d, stride, pad) for d in (5, 4, 5))
    m = conv_matrix(cin_conv, dims, w, stride, pad)
    out_dims = [(d + 2 * pad - 3) // stride + 1 for d in dims]
    y = rng.normal(size=(cout_conv, *out_dims))
    got = transposed_conv3d(t64(y), t64(w), t64(np.zeros(cin_conv)), stride, pad).data
    assert got.shape[1:] == dims
    np.testing.assert_allclose(got.ravel(), m.T @ y.ravel(), rtol=1e-5, atol=1e-9)


def test_transposed_conv_errors():
    with pytest.raises(ShapeError):
        transposed_conv3d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1)), 1, 1)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    stride=st.integers(1, 2),
    pad=st.integers(0, 2),
    cin=st.integers(1, 3),
    cout=st.integers(1, 3),
)
def test_conv_and_transpose_are_adjoint(seed, stride, pad, cin, cout):
    rng = np.random.default_rng(seed)
    dims = tuple(matching_extent(int(d), stride, pad) for d in rng.integers(3, 7, size=3))
    w = rng.normal(size=(cout, cin, 3, 3, 3))
    x = rng.normal(size=(cin, *dims))
    cx = conv3d(t64(x), t64(w), t64(np.zeros(cout)), stride, pad).data
    y = rng.normal(size=cx.shape)
    ty = transposed_conv3d(t64(y), t64(w), t64(np.zeros(cin)), stride, pad).data
    assert ty.shape[1:] == dims
    lhs, rhs = float(np.sum(cx * y)), float(np.sum(x * ty))
    assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))


# -- elementwise and loss -----------------------------------------------------

def test_linear_blend_endpoints_and_value():
    a, b = Tensor([1.0, -2.0, 3.5]), Tensor([7.0, 0.25, -1.0])
    np.testing.assert_array_equal(linear_blend(a, b, 0).data, a.data)
    np.testing.assert_array_equal(linear_blend(a, b, 1).data, b.data)
    assert linear_blend(Tensor([2.0]), Tensor([4.0]), 0.25).data.tolist() == [2.5]


def test_linear_blend_errors():
    with pytest.raises(ValueError):
        linear_blend(Tensor([1.0]), Tensor([2.0]), 1.5)
    with pytest.raises(ShapeError):
        linear_blend(Tensor([1.0]), Tensor([2.0, 3.0]), 0.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(0, 1e3)), min_size=1, max_size=20), st.floats(0, 1))
def test_linear_blend_stays_between(pairs, alpha):
    a = np.array([p[0] for p in pairs])
    b = a + np.array([p[1] for p in pairs])
    out = linear_blend(t64(a), t64(b), alpha).data
    tol = 1e-12 * (1 + np.abs(a) + np.abs(b))
    assert np.all(out >= a - tol) and np.all(out <= b + tol)


def test_mse_loss_values():
    assert mse_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).data == 0
    assert float(mse_loss(Tensor([1.0, 1.0]), Tensor([0.0, 2.0])).data) == 1.0
    rng = np.random.default_rng(4)
    p, t = rng.normal(size=(3, 4, 5)).astype(np.float32), rng.normal(size=(3, 4, 5)).astype(np.float32)
    acc = 0.0
    for u, v in zip(p.ravel().tolist(), t.ravel().tolist()):
        acc += (u - v) ** 2
    assert abs(float(mse_loss(Tensor(p), Tensor(t)).data) - acc / p.size) < 1e-6
    with pytest.raises(ShapeError):
        mse_loss(Tensor([1.0]), Tensor([1.0, 2.0]))


def test_check_finite():
    check_finite(Tensor([1.0, 2.0]))
    with pytest.raises(NonFiniteError):
        check_finite(Tensor([1.0, np.nan]))


# -- backward -----------------------------------------------------------------

def test_backward_scalar_hand_derivative():
    w = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = mse_loss(scale(w, 2.0), Tensor([0.0]))
    backward(loss, tape)
    assert w.grad.tolist() == [8.0]


def test_backward_constant_loss_leaves_grads_empty():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        loss = mse_loss(x, Tensor([0.0, 0.0]))
    backward(loss, tape)
    assert x.grad is None and len(tape) == 0


def test_backward_errors():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = scale(w, 3.0)
    with pytest.raises(ShapeError):
        backward(y, tape)
    with Tape() as other:
        loss = mse_loss(w, Tensor([0.0, 0.0]))
    with pytest.raises(TapeError):
        backward(loss, tape)
    backward(loss, other)


def test_backward_reverse_order_and_fanout():
    w = Tensor([0.5, -1.0], requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        h = relu(w)
        s = add(h, scale(w, 2.0))  # w used twice
        loss = mse_loss(s, Tensor([0.0, 0.0], dtype=np.float64))
    assert tape.op_names() == ["relu", "scale", "add", "mse_loss"]
    backward(loss, tape)
    # s = [1.5, -2.0]; dL/ds = s; ds/dw = [3, 2]
    np.testing.assert_allclose(w.grad, [4.5, -4.0])
    assert h.grad is not None and s.grad is not None


def _rand_instance(rng, kind):
    cin, cout = rng.integers(1, 3, size=2)
    dims = tuple(int(d) for d in rng.integers(3, 6, size=3))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.normal(size=(cin, *dims))
    if kind == "conv3d":
        w = rng.normal(size=(cout, cin, 3, 3, 3)) * 0.3
        out = conv3d(t64(x), t64(w), t64(np.zeros(cout)), stride, pad)
        fn = lambda a, k, b: conv3d(a, k, b, stride, pad)
    else:
        w = rng.normal(size=(cin, cout, 3, 3, 3)) * 0.3
        out = transposed_conv3d(t64(x), t64(w), t64(np.zeros(cout)), stride, pad)
        fn = lambda a, k, b: transposed_conv3d(a, k, b, stride, pad)
    target = rng.normal(size=out.shape)
    b = rng.normal(size=cout)
    return (lambda a, k, bb: mse_loss(fn(a, k, bb), t64(target))), [x, w, b]


@pytest.mark.parametrize("kind", ["conv3d", "transposed_conv3d"])
def test_conv_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(5)
    for _ in range(3):
        loss, arrays = _rand_instance(rng, kind)
        assert check_gradients(loss, arrays) < 1e-4


def test_concat_gradient():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(1, 3, 3, 3)), rng.normal(size=(2, 3, 3, 3))
    target = rng.normal(size=(3, 3, 3, 3))
    err = check_gradients(lambda u, v: mse_loss(concat([u, v]), t64(target)), [a, b])
    assert err < 1e-4


def test_ops_are_deterministic():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(2, 2, 6, 6, 6)))
    w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)))
    b = Tensor(rng.normal(size=3))
    first = conv3d(x, w, b, 1, 1).data.tobytes()
    assert all(conv3d(x, w, b, 1, 1).data.tobytes() == first for _ in range(3))


def test_backends_agree_bitwise():
    if _backend.BACKEND != "cython":
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(8)
    xp = rng.normal(size=(2, 3, 9, 8, 7)).astype(np.float32)
    py_v2c, py_c2v = _backend.get_kernels("python")
    cy_v2c, cy_c2v = _backend.get_kernels("cython")
    for stride in (1, 2):
        dims = [(d - 3) // stride + 1 for d in xp.shape[2:]]
        cols = py_v2c(xp, 3, stride, *dims)
        np.testing.assert_array_equal(cols, cy_v2c(xp, 3, stride, *dims))
        cols = rng.normal(size=cols.shape).astype(np.float32)
        np.testing.assert_array_equal(
            py_c2v(cols, 2, 3, *xp.shape[2:], 3, stride, *dims),
            cy_c2v(cols, 2, 3, *xp.shape[2:], 3, stride, *dims),
        )
