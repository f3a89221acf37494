import numpy as np
import pytest

from kgdecomp import autodiff as ad
from kgdecomp.autodiff import BatchNormState, Tensor, grad_check
from kgdecomp.errors import ConfigError, NumericalError, ShapeError


def weighted(out: Tensor, w: np.ndarray) -> Tensor:
    """Random projection to a scalar so no gradient coordinate is trivially zero."""
    return ad.sum(ad.mul(out, Tensor(w)))


def test_backward_accumulates_through_shared_nodes():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ad.mul(x, x)
    ad.sum(ad.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_grad_check_square():
    res = grad_check(lambda x: ad.sum(ad.mul(x, x)), [Tensor([1.0, 2.0])])
    assert res.max_rel_error < 1e-9


def test_grad_check_flags_nonfinite():
    def f(x):
        return Tensor.from_op(np.asarray(np.inf), (x,), lambda g: (np.zeros(2),))

    with pytest.raises(NumericalError):
        grad_check(f, [Tensor([1.0, 2.0])])


def test_linear_examples():
    out = ad.linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])
    out = ad.linear(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(out.data, [[6.0]])


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones(2)))


def test_linear_gradient():
    rng = np.random.default_rng(0)
    x, W, b = (Tensor(rng.uniform(-1, 1, s)) for s in [(3, 5), (5, 7), (7,)])
    w = rng.uniform(-1, 1, (3, 7))
    assert grad_check(lambda x, W, b: weighted(ad.linear(x, W, b), w), [x, W, b]).max_rel_error < 1e-6


def test_conv1d_identity_kernel():
    x = Tensor([[[0.0, 1.0, 0.0, 0.0]]])
    out = ad.conv1d(x, Tensor([[[1.0]]]), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, [[[0.0, 1.0, 0.0, 0.0]]])


def test_conv1d_boundary_sums():
    out = ad.conv1d(Tensor([[[1.0, 1.0, 1.0, 1.0]]]), Tensor([[[1.0, 1.0, 1.0]]]), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, [[[2.0, 3.0, 3.0, 2.0]]])


def test_conv1d_even_kernel_padding_is_left_floor():
    # ksize 4: one zero on the left, two on the right
    x = Tensor([[[1.0, 2.0, 3.0]]])
    out = ad.conv1d(x, Tensor([[[1.0, 0.0, 0.0, 0.0]]]), None)
    np.testing.assert_array_equal(out.data, [[[0.0, 1.0, 2.0]]])


def test_conv1d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 1, 9))
    k = rng.normal(size=(3, 1, 4))
    b = rng.normal(size=3)
    out = ad.conv1d(Tensor(x), Tensor(k), Tensor(b)).data
    left = 1
    xp = np.pad(x[:, 0], ((0, 0), (left, 4 - 1 - left)))
    ref = np.zeros((2, 3, 9))
    for i in range(2):
        for c in range(3):
            for t in range(9):
                ref[i, c, t] = b[c] + sum(k[c, 0, u] * xp[i, t + u] for u in range(4))
    np.testing.assert_allclose(out, ref, atol=1e-13)


def test_conv1d_identity_on_random_input():
    x = np.random.default_rng(4).normal(size=(5, 1, 13))
    np.testing.assert_array_equal(ad.conv1d(Tensor(x), Tensor([[[1.0]]]), Tensor([0.0])).data[:, 0], x[:, 0])


def test_conv1d_gradient():
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(-1, 1, (2, 1, 10)))
    k = Tensor(rng.uniform(-1, 1, (4, 1, 3)))
    b = Tensor(rng.uniform(-1, 1, 4))
    w = rng.uniform(-1, 1, (2, 4, 10))
    assert grad_check(lambda x, k, b: weighted(ad.conv1d(x, k, b), w), [x, k, b]).max_rel_error < 1e-6


def test_batchnorm_unit_example():
    st = BatchNormState.create(1)
    out = ad.batchnorm(Tensor([[-1.0], [1.0]]), st, training=True)
    expect = 1 / np.sqrt(1 + st.eps)
    np.testing.assert_allclose(out.data[:, 0], [-expect, expect], rtol=1e-15)


def test_batchnorm_zero_variance_channel():
    st = BatchNormState.create(2)
    st.gamma.data[:] = 2.0
    st.beta.data[:] = 5.0
    x = np.array([[3.0, 1.0], [3.0, 2.0], [3.0, 7.0]])
    out = ad.batchnorm(Tensor(x), st, training=True)
    np.testing.assert_array_equal(out.data[:, 0], [5.0, 5.0, 5.0])


def test_batchnorm_output_statistics():
    rng = np.random.default_rng(5)
    x = rng.normal(2.0, 3.0, size=(8, 4))
    st = BatchNormState.create(4)
    out = ad.batchnorm(Tensor(x), st, training=True).data
    var = x.var(axis=0)
    assert np.abs(out.mean(axis=0)).max() < 1e-12
    np.testing.assert_allclose(out.var(axis=0), var / (var + st.eps), atol=1e-9)


def test_batchnorm_running_stats_update():
    x = np.array([[1.0], [3.0]])
    st = BatchNormState.create(1, momentum=0.1)
    ad.batchnorm(Tensor(x), st, training=True)
    np.testing.assert_allclose(st.running_mean, [0.2])
    np.testing.assert_allclose(st.running_var, [0.9 + 0.1 * 2.0])


def test_batchnorm_degenerate_batch():
    with pytest.raises(ShapeError):
        ad.batchnorm(Tensor([[1.0, 2.0]]), BatchNormState.create(2), training=True)


def test_batchnorm_inference_is_affine_and_composes():
    rng = np.random.default_rng(6)
    st = BatchNormState.create(3)
    st.gamma.data[:] = rng.uniform(0.5, 2, 3)
    st.beta.data[:] = rng.normal(size=3)
    st.running_mean = rng.normal(size=3)
    st.running_var = rng.uniform(0.5, 2, 3)
    x = rng.normal(size=(6, 3, 5))
    twice = ad.batchnorm(ad.batchnorm(Tensor(x), st, False), st, False).data
    a = st.gamma.data / np.sqrt(st.running_var + st.eps)
    c = st.beta.data - a * st.running_mean
    a2, c2 = a * a, a * c + c
    np.testing.assert_allclose(twice, a2[None, :, None] * x + c2[None, :, None], atol=1e-12)


@pytest.mark.parametrize("shape", [(8, 4), (3, 2, 5)])
def test_batchnorm_gradient(shape):
    rng = np.random.default_rng(7)
    st = BatchNormState.create(shape[1])
    st.gamma.data[:] = rng.uniform(0.5, 1.5, shape[1])
    st.beta.data[:] = rng.uniform(-1, 1, shape[1])
    x = Tensor(rng.uniform(-1, 1, shape))
    w = rng.uniform(-1, 1, shape)
    res = grad_check(lambda x, g, b: weighted(ad.batchnorm(x, st, True), w), [x, st.gamma, st.beta])
    assert res.max_rel_error < 1e-5


def test_dropout_rate_zero_and_inference_identity():
    x = Tensor(np.arange(6.0))
    rng = np.random.default_rng(0)
    assert ad.dropout(x, 0.0, rng, True) is x
    assert ad.dropout(x, 0.5, rng, False) is x


def test_dropout_rejects_rate_one():
    with pytest.raises(ConfigError):
        ad.dropout(Tensor([1.0]), 1.0, np.random.default_rng(0), True)


def test_dropout_expectation():
    n, rate = 10_000, 0.3
    out = ad.dropout(Tensor(np.ones(n)), rate, np.random.default_rng(11), True).data
    sigma = np.sqrt(rate / (1 - rate) / n)
    assert abs(out.mean() - 1.0) < 3 * sigma
    assert set(np.unique(out)) <= {0.0, 1 / (1 - rate)}


def test_dropout_backward_uses_same_mask():
    x = Tensor(np.ones(50), requires_grad=True)
    out = ad.dropout(x, 0.5, np.random.default_rng(1), True)
    ad.sum(out).backward()
    np.testing.assert_array_equal(x.grad, out.data)


def test_l2_normalize_examples():
    np.testing.assert_allclose(ad.l2_normalize(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]])
    u = np.array([[0.0, 1.0, 0.0]])
    np.testing.assert_array_equal(ad.l2_normalize(Tensor(u)).data, u)


def test_l2_normalize_zero_row_counted():
    before = ad.degenerate_rows
    out = ad.l2_normalize(Tensor([[0.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(out.data, [[0.0, 0.0], [1.0, 0.0]])
    assert ad.degenerate_rows == before + 1


def test_l2_normalize_idempotent():
    x = np.random.default_rng(8).normal(size=(10, 6))
    once = ad.l2_normalize(Tensor(x)).data
    np.testing.assert_allclose(ad.l2_normalize(Tensor(once)).data, once, atol=1e-12)


def test_l2_normalize_gradient():
    rng = np.random.default_rng(9)
    x = Tensor(rng.uniform(-1, 1, (4, 6)))
    w = rng.uniform(-1, 1, (4, 6))
    assert grad_check(lambda x: weighted(ad.l2_normalize(x), w), [x]).max_rel_error < 1e-6


def test_normalize_rows_projection():
    t = np.array([[3.0, 4.0], [0.0, 0.0], [1.0, 0.0], [5.0, 5.0]])
    skipped = ad.normalize_rows_(t, 0, 3)
    assert skipped == 1
    np.testing.assert_allclose(t[:3], [[0.6, 0.8], [0.0, 0.0], [1.0, 0.0]])
    np.testing.assert_array_equal(t[3], [5.0, 5.0])


@pytest.mark.parametrize("spec,shapes", [
    ("bk,bk,bk->b", [(3, 4)] * 3),
    ("bi,bij->bj", [(2, 3), (2, 3, 3)]),
    ("bij,bj->bi", [(2, 3, 3), (2, 3)]),
])
def test_einsum_gradient(spec, shapes):
    rng = np.random.default_rng(10)
    ts = [Tensor(rng.uniform(-1, 1, s)) for s in shapes]
    out_shape = np.einsum(spec, *(t.data for t in ts)).shape
    w = rng.uniform(-1, 1, out_shape)
    assert grad_check(lambda *xs: weighted(ad.einsum(spec, *xs), w), ts).max_rel_error < 1e-6


def test_einsum_rejects_internal_summation():
    with pytest.raises(ShapeError):
        ad.einsum("ij->i", Tensor(np.ones((2, 2))))


def test_structural_ops_gradients():
    rng = np.random.default_rng(12)
    table = Tensor(rng.uniform(-1, 1, (5, 4)))
    idx = np.array([0, 3, 3, 1])
    w = rng.uniform(-1, 1, (4, 6))

    def f(t):
        rows = ad.take(t, idx)
        both = ad.concat([ad.columns(rows, 0, 2), ad.columns(rows, 1, 4), ad.columns(ad.rows(rows, 0, 4), 3, 4)],
                         axis=1)
        return weighted(ad.matmul(ad.reshape(both, (4, 6)), Tensor(np.eye(6))), w)

    assert grad_check(f, [table]).max_rel_error < 1e-6
