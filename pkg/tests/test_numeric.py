import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tlra.numeric import (
    DegenerateInputError,
    DimensionError,
    EvaluationError,
    Parameter,
    Tensor,
    concat,
    cosine_sim,
    grad_check,
    l2_normalize,
    mean_pool,
    softmax,
    stack,
    where,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_cosine_examples():
    v = np.array([0.3, -2.0, 5.0])
    assert cosine_sim(v, v).item() == pytest.approx(1.0, abs=1e-9)
    assert cosine_sim([1.0, 0.0], [0.0, 1.0]).item() == 0.0
    # 32 / (sqrt(14) * sqrt(77)) by hand
    assert cosine_sim([1, 2, 3], [4, 5, 6]).item() == pytest.approx(0.9746318461970762, abs=1e-12)


def test_cosine_errors_and_zero_convention():
    with pytest.raises(DimensionError):
        cosine_sim(np.zeros(0), np.zeros(0))
    with pytest.raises(DimensionError):
        cosine_sim([1.0, 2.0], [1.0, 2.0, 3.0])
    assert cosine_sim([0.0, 0.0], [0.0, 0.0]).item() == 0.0


@given(arrays(np.float64, 5, elements=st.floats(-10, 10)), arrays(np.float64, 5, elements=st.floats(-10, 10)),
       st.floats(0.1, 1e3))
def test_cosine_symmetric_and_scale_invariant(a, b, lam):
    # the 1e-12 denominator term bounds the error by 1e-12 / (lam |a| |b|)
    if np.linalg.norm(a) < 0.1 or np.linalg.norm(b) < 0.1:
        return
    c = cosine_sim(a, b).item()
    assert -1 - 1e-12 <= c <= 1 + 1e-12
    assert c == pytest.approx(cosine_sim(b, a).item(), abs=1e-12)
    assert c == pytest.approx(cosine_sim(lam * a, b).item(), abs=1e-9)


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, 0.0]).data, [0.5, 0.5])
    assert softmax([7.3]).data.tolist() == [1.0]
    np.testing.assert_allclose(
        softmax([1.0, 2.0, 3.0]).data, [0.09003057317038046, 0.24472847105479767, 0.6652409557748219], atol=1e-12
    )
    with pytest.raises(DimensionError):
        softmax(np.zeros(0))


@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_is_a_distribution(s):
    p = softmax(s).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-9


def test_mean_pool_examples(rng):
    np.testing.assert_array_equal(mean_pool([[1.0, 2.0]]).data, [1.0, 2.0])
    np.testing.assert_array_equal(mean_pool([[1.0, 1.0], [3.0, 3.0]]).data, [2.0, 2.0])
    x = np.random.default_rng(0).standard_normal((5, 4))
    oracle = [sum(x[t][j] for t in range(5)) / 5 for j in range(4)]
    np.testing.assert_allclose(mean_pool(x).data, oracle, atol=1e-14)
    with pytest.raises(DimensionError):
        mean_pool(np.zeros((0, 3)))


def test_mean_pool_mask_ignores_padding():
    x = np.array([[[1.0], [3.0], [100.0]]])
    assert mean_pool(x, [[1, 1, 0]]).data.tolist() == [[2.0]]


def test_l2_normalize():
    np.testing.assert_allclose(l2_normalize([3.0, 4.0]).data, [0.6, 0.8], atol=1e-12)
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(l2_normalize(u).data, u, atol=1e-12)
    np.testing.assert_allclose(l2_normalize([2.0, 0.0, 0.0]).data, [1.0, 0.0, 0.0], atol=1e-12)
    with pytest.raises(DegenerateInputError):
        l2_normalize([0.0, 0.0])


@given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)))
def test_l2_normalize_unit(v):
    if np.linalg.norm(v) < 1e-6:
        return
    assert abs(np.linalg.norm(l2_normalize(v).data) - 1.0) < 1e-9


def test_grad_check_square():
    x = Parameter([3.0], "x")
    assert grad_check(lambda: (x * x).sum(), [x]) < 1e-8
    x.zero_grad()
    (x * x).sum().backward()
    assert x.grad[0] == pytest.approx(6.0)


def test_grad_check_cosine_random():
    r = np.random.default_rng(1)
    a, b = Parameter(r.standard_normal(8), "a"), Parameter(r.standard_normal(8), "b")
    assert grad_check(lambda: cosine_sim(a, b), [a, b]) < 1e-6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_rejects_non_finite():
    x = Parameter([-1.0], "x")
    with pytest.raises(EvaluationError):
        grad_check(lambda: x.sqrt().sum(), [x])


OPS = {
    "add_mul": lambda a, b: ((a * b) + a).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "matmul": lambda a, b: (a.reshape(2, 3) @ b.reshape(3, 2)).tanh().sum(),
    "matvec": lambda a, b: (a.reshape(2, 3) @ b[0:3]).exp().sum(),
    "cosine_batch": lambda a, b: cosine_sim(a.reshape(2, 3), b.reshape(2, 3)).sum(),
    "softmax": lambda a, b: (softmax(a) * b).sum(),
    "mean_pool": lambda a, b: (mean_pool(a.reshape(3, 2)) * b[0:2]).sum(),
    "l2_normalize": lambda a, b: (l2_normalize(a) * b).sum(),
    "concat_stack": lambda a, b: (stack([concat([a[0:2], b[0:1]]), b[3:6]]) ** 2).sum(),
    "where_clip": lambda a, b: where(a.data > 0, a, b).clip(-0.5, 0.5).sum(),
    "abs_relu": lambda a, b: (a.abs() + b.relu()).sum(),
    "transpose_getitem": lambda a, b: (a.reshape(2, 3).T[1] * b[1:3]).sum(),
    "pow_sqrt": lambda a, b: ((a * a + 1.0).sqrt() * b ** 3).mean(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_grad_check(name):
    r = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = 0.0
    for trial in range(100):
        a = Parameter(r.standard_normal(6), "a")
        b = Parameter(r.standard_normal(6), "b")
        worst = max(worst, grad_check(lambda: OPS[name](a, b), [a, b]))
    assert worst < 1e-5


def test_backward_accumulates_shared_subgraph():
    x = Parameter([2.0], "x")
    y = Parameter([-4.0], "y")
    ((x + y) * (x + 1.0)).sum().backward()
    assert x.grad[0] == pytest.approx(1.0)
    assert y.grad[0] == pytest.approx(3.0)


def test_graph_freed_after_backward():
    x = Parameter(np.ones(3), "x")
    out = (x * 2.0).sum()
    out.backward()
    assert out._parents == () and out._backward is None


def test_constant_ops_do_not_record():
    t = Tensor([1.0, 2.0]) * 3.0
    assert not t.requires_grad and t._parents == ()


def test_outputs_finite_on_extreme_inputs():
    big = np.array([1e3, -1e3, 0.0])
    assert np.all(np.isfinite(softmax(big).data))
    assert math.isfinite(cosine_sim(big, [1e-300, 0.0, 0.0]).item())
