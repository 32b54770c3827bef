import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from eve import kernels
from eve import tensor as T
from eve.gradcheck import check_ops
from eve.kernels import _numpy as ref


def test_every_op_matches_finite_differences(backend):
    results = check_ops(tolerance=1e-6)
    bad = [(r.group, r.max_rel_error) for r in results if not r.passed]
    assert not bad


def test_leaf_gradients_accumulate():
    a = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (a * 3.0).sum().backward()
    (a * 2.0).sum().backward()
    np.testing.assert_allclose(a.grad, [5.0, 5.0])


def test_shared_subexpression_sums_both_paths():
    a = T.Tensor(np.array(3.0), requires_grad=True)
    b = a * a
    (b + b).backward()
    assert float(a.grad) == pytest.approx(12.0)


def test_backward_requires_scalar():
    a = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (a * 2.0).backward()


def test_no_grad_records_nothing():
    a = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = (a * 2.0).sum()
    assert not y.requires_grad
    assert y.op == "leaf"


def test_broadcast_trailing_dims_only():
    a = T.Tensor(np.ones((2, 3)), requires_grad=True)
    b = T.Tensor(np.ones(3), requires_grad=True)
    (a + b).sum().backward()
    np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])
    with pytest.raises(T.ShapeError):
        T.add(a, T.Tensor(np.ones((2, 1, 3))))


def test_matmul_shape_error():
    with pytest.raises(T.ShapeError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 2))))


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        T.softmax(T.Tensor(np.array([[0.0, np.nan]])))


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy(T.Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_masked_softmax_zero_weight_on_masked_keys():
    x = T.Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)))
    valid = np.array([[True, False, True, True], [True, True, False, False]])
    y = T.masked_softmax(x, valid[:, None, :]).data
    assert np.all(y[0, :, 1] == 0.0)
    assert np.all(y[1, :, 2:] == 0.0)
    np.testing.assert_allclose(y.sum(-1), 1.0, rtol=1e-6)


def test_float32_is_default_and_float64_available():
    assert T.Tensor([1.0, 2.0]).dtype == np.float32
    with T.default_dtype(np.float64):
        assert T.Tensor([1.0]).dtype == np.float64
    assert T.get_default_dtype() == np.float32


def test_gelu_matches_tanh_formula():
    x = np.linspace(-5, 5, 101)
    want = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    with T.default_dtype(np.float64):
        np.testing.assert_allclose(T.gelu(T.Tensor(x)).data, want, atol=1e-12)


# -- backend parity --------------------------------------------------------

arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=9),
                    elements=st.floats(-20, 20))


@pytest.mark.skipif("numba" not in kernels.available_backends(), reason="numba unavailable")
@settings(max_examples=40, deadline=None)
@given(arrays)
def test_numba_kernels_match_numpy(x):
    from eve.kernels import _numba as nb
    y1, t1 = ref.gelu_fwd(x)
    y2, t2 = nb.gelu_fwd(x)
    np.testing.assert_allclose(y1, y2, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(ref.gelu_bwd(x, t1, x), nb.gelu_bwd(x, t2, x), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(ref.softmax_fwd(x), nb.softmax_fwd(x), rtol=1e-12, atol=1e-15)
    valid = np.ones((1, x.shape[1]), dtype=bool)
    valid[0, ::2] = False
    valid[0, 0] = True
    np.testing.assert_allclose(ref.masked_softmax_fwd(x, valid, x.shape[0]),
                               nb.masked_softmax_fwd(x, valid, x.shape[0]), rtol=1e-12, atol=1e-15)
    g, b = np.linspace(0.5, 1.5, x.shape[1]), np.linspace(-1, 1, x.shape[1])
    a = ref.layernorm_fwd(x, g, b, 1e-5)
    c = nb.layernorm_fwd(x, g, b, 1e-5)
    for u, v in zip(a, c):
        np.testing.assert_allclose(u, v, rtol=1e-9, atol=1e-9)
    tgt = np.zeros(x.shape[0], dtype=np.int64)
    for u, v in zip(ref.cross_entropy_fwd(x, tgt), nb.cross_entropy_fwd(x, tgt)):
        np.testing.assert_allclose(u, v, rtol=1e-10, atol=1e-12)


def test_backend_flag_selects_numpy(monkeypatch):
    prev = kernels.BACKEND
    kernels.use_backend("numpy")
    try:
        assert kernels.gelu_fwd is ref.gelu_fwd
    finally:
        kernels.use_backend(prev)
    with pytest.raises(ValueError):
        kernels.use_backend("cuda")


def test_take_scalar_index_backward():
    a = T.Tensor(np.arange(12.0).reshape(2, 3, 2), requires_grad=True)
    T.take(a, 1, axis=1).sum().backward()
    want = np.zeros((2, 3, 2))
    want[:, 1] = 1.0
    np.testing.assert_array_equal(a.grad, want)
    b = T.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    (T.take(b, 2, axis=0) * 2.0).sum().backward()
    np.testing.assert_array_equal(b.grad, [[0, 0], [0, 0], [2, 2]])
