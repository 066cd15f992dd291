import numpy as np
import pytest

from tlra.data import MODALITIES, Modality, SchemaError
from tlra.encoders import DualPathEncoder
from tlra.numeric import Tensor, cosine_sim, grad_check

DIMS = {Modality.L: 5, Modality.A: 4, Modality.V: 3}


@pytest.fixture
def enc():
    return DualPathEncoder(DIMS, d=6, rng=np.random.default_rng(0))


@pytest.mark.parametrize("m", MODALITIES)
def test_modal_output_shape_and_purity(enc, m):
    h = np.random.default_rng(1).standard_normal((7, DIMS[m]))
    a = enc.encode_modal(h, m)
    b = enc.encode_modal(h.copy(), m)
    assert a.shape == (6,)
    np.testing.assert_array_equal(a.data, b.data)


def test_modal_single_step_pools_to_the_row(enc):
    h = np.random.default_rng(2).standard_normal((1, 5))
    me = enc.modal[Modality.L]
    row = me.ff(me.proj(Tensor(h))).data[0]
    np.testing.assert_allclose(enc.encode_modal(h, Modality.L).data, row, atol=1e-15)


@pytest.mark.parametrize("m", MODALITIES)
def test_query_shapes_and_pooling(enc, m):
    h = np.random.default_rng(3).standard_normal((9, DIMS[m]))
    seq, q = enc.encode_query(h, m)
    assert seq.shape == (9, 6) and q.shape == (6,)
    np.testing.assert_allclose(q.data, seq.data.mean(axis=0), atol=1e-12)


def test_conv_uses_zero_same_padding(enc):
    h = np.random.default_rng(4).standard_normal((4, 5))
    conv = enc.query[Modality.L].conv
    out = conv(Tensor(h)).data
    W, b = conv.W.data, conv.b.data
    hp = np.vstack([np.zeros(5), h, np.zeros(5)])
    oracle = np.array([np.concatenate([hp[t], hp[t + 1], hp[t + 2]]) @ W + b for t in range(4)])
    np.testing.assert_allclose(out, oracle, atol=1e-12)


def test_zero_input_query_is_finite_and_deterministic(enc):
    h = np.zeros((3, 4))
    _, q1 = enc.encode_query(h, Modality.A)
    _, q2 = enc.encode_query(h, Modality.A)
    assert np.all(np.isfinite(q1.data))
    np.testing.assert_array_equal(q1.data, q2.data)


def test_dimension_mismatch(enc):
    with pytest.raises(SchemaError):
        enc.encode_modal(np.zeros((3, 2)), Modality.L)
    with pytest.raises(SchemaError):
        enc.encode_query(np.zeros((0, 5)), Modality.L)


def test_paths_share_the_space(enc):
    r = np.random.default_rng(5)
    for m in MODALITIES:
        for n in MODALITIES:
            F = enc.encode_modal(r.standard_normal((4, DIMS[m])), m)
            _, q = enc.encode_query(r.standard_normal((4, DIMS[n])), n)
            assert np.isfinite(cosine_sim(F, q).item())


def test_batched_padding_matches_unbatched(enc):
    r = np.random.default_rng(6)
    h1, h2 = r.standard_normal((3, 5)), r.standard_normal((5, 5))
    x = np.zeros((2, 5, 5))
    x[0, :3], x[1] = h1, h2
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=float)
    F = enc.encode_modal(x, Modality.L, mask).data
    _, q = enc.encode_query(x, Modality.L, mask)
    np.testing.assert_allclose(F[0], enc.encode_modal(h1, Modality.L).data, atol=1e-12)
    np.testing.assert_allclose(q.data[0], enc.encode_query(h1, Modality.L)[1].data, atol=1e-12)
    np.testing.assert_allclose(q.data[1], enc.encode_query(h2, Modality.L)[1].data, atol=1e-12)


@pytest.mark.parametrize("share", [False, True])
def test_gradients_through_both_paths(share):
    enc = DualPathEncoder(DIMS, d=3, rng=np.random.default_rng(7), share_paths=share)
    h = np.random.default_rng(8).standard_normal((4, 4))
    t = np.random.default_rng(9).standard_normal(3)

    def f():
        F = enc.encode_modal(h, Modality.A)
        _, q = enc.encode_query(h, Modality.A)
        return ((F - t) * (F - t)).sum() + (q * F).sum()

    assert grad_check(f, enc.parameters()) < 1e-4


def test_gradient_wrt_input():
    enc = DualPathEncoder(DIMS, d=3, rng=np.random.default_rng(10))
    from tlra.numeric import Parameter

    h = Parameter(np.random.default_rng(11).standard_normal((3, 3)), "h")
    assert grad_check(lambda: enc.encode_query(h, Modality.V)[1].tanh().sum(), [h]) < 1e-6


def test_share_paths_shares_feedforward():
    enc = DualPathEncoder(DIMS, d=3, rng=np.random.default_rng(0), share_paths=True)
    assert enc.query[Modality.L].ff is enc.modal[Modality.L].ff
    names = [p.name for p in enc.parameters()]
    assert len(names) == len(set(names))
