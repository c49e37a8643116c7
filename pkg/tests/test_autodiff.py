import numpy as np
import pytest
from scipy.special import digamma as sp_digamma
from scipy.special import gammaln as sp_gammaln

from evplan import autodiff as ad


def check_grad(fn, *shapes, seed=0, positive=False, h=1e-6, tol=1e-6):
    """Compare reverse-mode gradients of sum(w * fn(*xs)) with central differences."""
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    out = fn(*[ad.Tensor(x) for x in xs])
    w = rng.normal(size=out.shape)

    def value(arrs):
        return float(np.sum(w * fn(*[ad.Tensor(a) for a in arrs]).data))

    leaves = [ad.Tensor(x.copy(), requires_grad=True) for x in xs]
    ad.sum(fn(*leaves) * w).backward()
    for i, x in enumerate(xs):
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            plus = [a.copy() for a in xs]
            minus = [a.copy() for a in xs]
            plus[i][idx] += h
            minus[i][idx] -= h
            num[idx] = (value(plus) - value(minus)) / (2 * h)
        np.testing.assert_allclose(leaves[i].grad, num, rtol=tol, atol=tol)


def test_elementwise_ops():
    check_grad(lambda a, b: a * b + a / (b * b + 1.0) - b, (3, 4), (3, 4))
    check_grad(lambda a: ad.exp(a) + ad.tanh(a) + ad.softplus(a) + ad.gelu(a), (5,))
    check_grad(lambda a: ad.log(a) + ad.sqrt(a), (6,), positive=True)
    check_grad(lambda a: ad.gammaln(a) + ad.digamma(a), (6,), positive=True, tol=1e-5)


def test_broadcasting_and_reductions():
    check_grad(lambda a, b: a + b, (3, 4), (4,))
    check_grad(lambda a, b: a * b, (2, 1, 4), (3, 1))
    check_grad(lambda a: ad.sum(a, axis=1, keepdims=True) * ad.mean(a, axis=0), (3, 4))
    check_grad(lambda a: ad.logsumexp(a, axis=-1), (3, 5))


def test_shape_ops():
    check_grad(lambda a: ad.transpose(ad.reshape(a, (2, 3, 2)), (2, 0, 1)), (3, 4))
    check_grad(lambda a, b: ad.concat([a, b], axis=1), (2, 3), (2, 2))
    check_grad(lambda a: ad.getitem(a, (slice(None), [0, 2, 2])), (3, 4))
    check_grad(lambda a: ad.take(a, np.array([0, 0, 2, 1]), axis=1), (2, 3))
    check_grad(lambda a: ad.broadcast_to(a, (3, 2, 4)), (2, 1))


def test_linear_algebra_ops():
    check_grad(lambda a, b: ad.matmul(a, b), (2, 3, 4), (4, 5))
    check_grad(lambda x, w, b: ad.linear(x, w, b), (2, 3, 4), (4, 5), (5,))
    check_grad(lambda x, g, b: ad.layer_norm(x, g, b), (3, 6), (6,), (6,))


def test_masked_max():
    mask = np.array([[True, False, True, True], [False, True, True, False]])[..., None]
    check_grad(lambda a: ad.masked_max(a, mask, axis=1), (2, 4, 3))


def test_attention_with_mask():
    mask = np.array([[True, True, False], [True, False, False]])[:, None, :]
    check_grad(lambda q, k, v: ad.attention(q, k, v, mask, 2), (2, 4, 6), (2, 3, 6), (2, 3, 6))


def naive_attention(q, k, v, mask, n_heads):
    *lead, lq, d = q.shape
    dh = d // n_heads
    out = np.zeros(q.shape)
    for b in np.ndindex(*lead):
        for h in range(n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(lq):
                usable = [j for j in range(k.shape[-2]) if mask is None or mask[b][j]]
                if not usable:
                    continue
                s = np.array([q[b][i, sl] @ k[b][j, sl] / np.sqrt(dh) for j in usable])
                p = np.exp(s - s.max())
                p /= p.sum()
                out[b][i, sl] = sum(pj * v[b][j, sl] for pj, j in zip(p, usable))
    return out


def test_attention_matches_naive_loops(rng):
    q, k, v = rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 5, 8)), rng.normal(size=(3, 5, 8))
    mask = rng.random((3, 5)) < 0.6
    mask[2] = False  # a query set with no usable keys gives zeros
    got = ad.attention(ad.Tensor(q), ad.Tensor(k), ad.Tensor(v), mask, 2).data
    np.testing.assert_allclose(got, naive_attention(q, k, v, mask, 2), atol=1e-12)
    assert np.all(got[2] == 0)


def test_special_function_values():
    x = np.array([0.3, 1.0, 4.5])
    np.testing.assert_allclose(ad.gammaln(ad.Tensor(x)).data, sp_gammaln(x))
    np.testing.assert_allclose(ad.digamma(ad.Tensor(x)).data, sp_digamma(x))


def test_no_grad_blocks_tape():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.sum(x * 2.0)
    assert y.data == 6.0
    assert not y.requires_grad


def test_gradient_accumulates_into_buffer():
    buf = np.zeros(4)
    x = ad.Tensor(np.arange(4.0), requires_grad=True, grad_buffer=buf)
    ad.sum(x * x).backward()
    np.testing.assert_allclose(buf, 2 * np.arange(4.0))


def test_clamp_min_passes_gradient_above_floor():
    x = ad.Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    ad.sum(ad.clamp_min(x, 0.0) * 3.0).backward()
    np.testing.assert_allclose(x.grad, [0.0, 3.0])


def test_unbroadcast_shapes():
    g = np.ones((2, 3, 4))
    assert ad.unbroadcast(g, (4,)).shape == (4,)
    np.testing.assert_allclose(ad.unbroadcast(g, (3, 1)), np.full((3, 1), 8.0))
    with pytest.raises(Exception):
        ad.Tensor(np.ones(2)) @ ad.Tensor(np.ones(3))
