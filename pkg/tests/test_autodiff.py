import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from default_moe import autodiff as ad
from default_moe.autodiff import GraphError, NumericError, ShapeError, Tensor

from conftest import fd_grad, rel_err


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# fixed-value examples ------------------------------------------------------------

def test_matmul_identity_and_projector():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(m)).data, m)
    proj = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
    out = proj @ Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_fd():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    (a @ b).sum().backward()
    fa = fd_grad(lambda: (a.data @ b.data).sum(), a.data)
    fb = fd_grad(lambda: (a.data @ b.data).sum(), b.data)
    assert rel_err(a.grad, fa) < 1e-6 and rel_err(b.grad, fb) < 1e-6


def test_softmax_examples():
    p = ad.softmax_rows(Tensor(np.zeros((1, 4)))).data
    assert np.array_equal(p, np.full((1, 4), 0.25))
    a = np.array([[0.3, -1.2, 2.0, 0.5]])
    assert np.allclose(ad.softmax_rows(Tensor(a + 17.0)).data, ad.softmax_rows(Tensor(a)).data, atol=1e-15)
    ref = np.exp([1.0, 2.0, 3.0]) / np.exp([1.0, 2.0, 3.0]).sum()
    assert np.allclose(ad.softmax_rows(Tensor(np.array([[1.0, 2.0, 3.0]]))).data[0], ref, rtol=1e-14)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        ad.softmax_rows(Tensor(np.array([[0.0, np.nan]])))


def test_softmax_rows_sum_to_one_in_both_precisions():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((50, 8)) * 5
    assert np.abs(ad.softmax_rows(Tensor(z)).data.sum(axis=1) - 1).max() < 1e-12
    p32 = ad.softmax_rows(Tensor(z.astype(np.float32))).data
    assert p32.dtype == np.float32 and np.abs(p32.sum(axis=1) - 1).max() < 1e-6


def test_causal_softmax_masks_future():
    p = ad.softmax_rows(Tensor(np.zeros((3, 3))), causal=True).data
    assert np.allclose(p, [[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]])


def test_swiglu_zero_cases():
    rng = np.random.default_rng(2)
    wg, wu, wd = (Tensor(rng.standard_normal(s)) for s in [(4, 6), (4, 6), (6, 4)])
    assert np.array_equal(ad.swiglu(Tensor(np.zeros((3, 4))), wg, wu, wd).data, np.zeros((3, 4)))
    z = [Tensor(np.zeros(s)) for s in [(4, 6), (4, 6), (6, 4)]]
    assert np.array_equal(ad.swiglu(Tensor(rng.standard_normal((3, 4))), *z).data, np.zeros((3, 4)))


def test_swiglu_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.swiglu(Tensor(np.ones((2, 4))), Tensor(np.ones((4, 6))), Tensor(np.ones((4, 5))), Tensor(np.ones((6, 4))))


def test_swiglu_gradient_matches_fd():
    rng = np.random.default_rng(3)
    x, wg, wu, wd = (leaf(rng.standard_normal(s)) for s in [(3, 4), (4, 5), (4, 5), (5, 4)])
    ad.swiglu(x, wg, wu, wd).sum().backward()

    def f():
        g = x.data @ wg.data
        return ((g / (1 + np.exp(-g)) * (x.data @ wu.data)) @ wd.data).sum()

    for t in (x, wg, wu, wd):
        assert rel_err(t.grad, fd_grad(f, t.data)) < 1e-6


def test_cross_entropy_examples():
    assert ad.cross_entropy(Tensor(np.zeros((5, 16))), np.arange(5)).item() == pytest.approx(np.log(16), abs=1e-12)
    z = np.zeros((2, 4))
    z[0, 1] = z[1, 3] = 20.0
    assert ad.cross_entropy(Tensor(z), np.array([1, 3])).item() < 1e-3
    rng = np.random.default_rng(4)
    z = rng.standard_normal((6, 5))
    t = rng.integers(0, 5, 6)
    ref = np.mean([np.log(np.exp(r).sum()) - r[k] for r, k in zip(z, t)])
    assert ad.cross_entropy(Tensor(z), t).item() == pytest.approx(ref, rel=1e-13)


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_backward_examples():
    x = leaf([1.0, 2.0, 3.0])
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones(3))
    x = leaf([1.0, 2.0, 3.0])
    (x * x).sum().backward()
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_errors():
    x = leaf(np.ones((2, 2)))
    with pytest.raises(GraphError, match="scalar"):
        (x @ x).backward()
    root = (x @ x).sum()
    root.backward()
    with pytest.raises(GraphError):
        root.backward()


def test_fan_out_accumulates():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((3, 3))
    x1, x2, x3 = leaf(a), leaf(a), leaf(a)
    (x1 @ x1).sum().backward()
    ad.sum_all(ad.matmul(x2, Tensor(a))).backward()
    ad.sum_all(ad.matmul(Tensor(a), x3)).backward()
    assert np.allclose(x1.grad, x2.grad + x3.grad, atol=1e-14)


def test_leaf_grads_accumulate_across_backward_calls():
    x = leaf([1.0, 2.0])
    (x * x).sum().backward()
    (x * x).sum().backward()
    assert np.array_equal(x.grad, [4.0, 8.0])


def test_no_grad_records_nothing_and_is_thread_local():
    x = leaf([1.0])
    seen = {}

    def worker():
        seen["other"] = (x * x).requires_grad

    with ad.no_grad():
        assert not (x * x).requires_grad
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen["other"] and (x * x).requires_grad


def test_composed_graph_matches_fd():
    rng = np.random.default_rng(6)
    x, w, g = leaf(rng.standard_normal((4, 5))), leaf(rng.standard_normal((5, 3))), leaf(rng.standard_normal(5))
    targets = rng.integers(0, 3, 4)

    def build():
        h = ad.rms_norm(x, g)
        return ad.cross_entropy(ad.silu(h @ w), targets)

    build().backward()

    def f():
        with ad.no_grad():
            return build().item()

    for t in (x, w, g):
        assert rel_err(t.grad, fd_grad(f, t.data)) < 1e-6


def test_graph_records_topological_order():
    x = leaf([1.0, 2.0])
    root = ((x * x) + x).sum()
    order = ad._topological_order(root)
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        assert all(pos[id(p)] < pos[id(n)] for p in n._parents)


# property: every differentiable op against central differences -------------------

def _ops(rng):
    s = lambda *shape: rng.uniform(-1, 1, shape)  # noqa: E731
    idx = rng.integers(0, 4, 5)
    return {
        "add": ([s(3, 4), s(3, 4)], lambda a, b: ad.add(a, b)),
        "sub": ([s(3, 4), s(3, 4)], lambda a, b: ad.sub(a, b)),
        "mul": ([s(3, 4), s(3, 4)], lambda a, b: ad.mul(a, b)),
        "scale": ([s(3, 4)], lambda a: ad.scale(a, -1.7)),
        "add_bias": ([s(3, 4), s(4)], lambda a, b: ad.add_bias(a, b)),
        "scale_rows": ([s(3, 4), s(3)], lambda a, w: ad.scale_rows(a, w)),
        "sigmoid": ([s(3, 4)], lambda a: ad.sigmoid(a)),
        "silu": ([s(3, 4)], lambda a: ad.silu(a)),
        "mean_all": ([s(3, 4)], lambda a: ad.mean_all(a)),
        "reshape": ([s(3, 4)], lambda a: ad.reshape(a, (2, 6))),
        "transpose": ([s(2, 3, 4)], lambda a: ad.transpose(a)),
        "matmul": ([s(3, 4), s(4, 2)], lambda a, b: ad.matmul(a, b)),
        "bmm": ([s(2, 3, 4), s(2, 4, 2)], lambda a, b: ad.matmul(a, b)),
        "softmax": ([s(3, 5)], lambda a: ad.softmax_rows(a)),
        "softmax_causal": ([s(2, 4, 4)], lambda a: ad.softmax_rows(a, causal=True)),
        "swiglu": ([s(3, 4), s(4, 5), s(4, 5), s(5, 4)], lambda x, a, b, c: ad.swiglu(x, a, b, c)),
        "rms_norm": ([s(3, 4), s(4)], lambda a, g: ad.rms_norm(a, g)),
        "take_rows": ([s(4, 3)], lambda a: ad.take_rows(a, idx)),
        "embedding": ([s(4, 3)], lambda w: ad.embedding(w, idx.reshape(1, 5))),
        "cross_entropy": ([s(5, 4)], lambda z: ad.cross_entropy(z, idx)),
    }


OP_NAMES = sorted(_ops(np.random.default_rng(0)))


@pytest.mark.parametrize("name", OP_NAMES)
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_op_gradients_match_central_differences(name, seed):
    rng = np.random.default_rng(seed)
    arrays, fn = _ops(rng)[name]
    leaves = [leaf(a) for a in arrays]
    probe = rng.uniform(-1, 1, np.shape(fn(*[Tensor(a) for a in arrays]).data))

    def scalar(out):
        return ad.sum_all(ad.mul(out, Tensor(probe))) if probe.ndim else out

    scalar(fn(*leaves)).backward()

    def f():
        with ad.no_grad():
            return scalar(fn(*leaves)).item()

    for t in leaves:
        assert rel_err(t.grad, fd_grad(f, t.data, step=1e-5)) < 1e-4
