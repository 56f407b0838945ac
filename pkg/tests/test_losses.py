import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crdnet.losses import LossConfig, euclidean_loss, local_count_loss, mse_loss, patch_count_errors, total_loss
from crdnet.tensor import Parameter, Tape, Tensor, backward

from oracles import brute_euclidean, brute_local_count, brute_patch_errors, central_difference, relative_error


def dyadic(rng, shape):
    """Random values on a 1/64 grid; every sum and product involved is exact in float64."""
    return rng.integers(-256, 257, size=shape) / 64.0


def grad_of(fn, d):
    p = Parameter(d, "d")
    with Tape() as tape:
        loss = fn(p)
    backward(tape, loss)
    return p.grad


def test_euclidean_examples():
    q = np.zeros((1, 1, 3, 3))
    assert euclidean_loss(Tensor(q), q).item() == 0.0
    d = q.copy()
    d[0, 0, 1, 2] = 2.0
    assert euclidean_loss(Tensor(d), q).item() == 4.0


def test_euclidean_random_batch(rng):
    d = rng.standard_normal((3, 1, 5, 4))
    q = rng.standard_normal((3, 1, 5, 4))
    assert abs(euclidean_loss(Tensor(d), q).item() - brute_euclidean(d, q)) < 1e-10
    g = grad_of(lambda p: euclidean_loss(p, q), d)
    np.testing.assert_allclose(g, (2.0 / 3) * (d - q), rtol=1e-14)
    num = central_difference(lambda: euclidean_loss(Tensor(d), q).item(), d)
    assert relative_error(g, num) < 1e-4


def test_euclidean_errors():
    with pytest.raises(ValueError):
        euclidean_loss(Tensor(np.zeros((1, 1, 3, 3))), np.zeros((1, 1, 3, 4)))
    with pytest.raises(ValueError):
        euclidean_loss(Tensor(np.zeros((0, 1, 3, 3))), np.zeros((0, 1, 3, 3)))


def test_local_count_examples():
    q = np.zeros((1, 1, 4, 4))
    assert local_count_loss(Tensor(q), q, 2, 2).item() == 0.0
    for pix in itertools.product(range(4), range(4)):
        d = q.copy()
        d[(0, 0) + pix] = 1.0
        assert local_count_loss(Tensor(d), q, 2, 2).item() == 1.0
    d = q.copy()
    d[0, 0, 1, 1] = 1.0
    assert local_count_loss(Tensor(d), q, 2, 1).item() == 4.0
    assert brute_local_count(d, q, 2, 1) == 4.0


def test_local_count_errors():
    with pytest.raises(ValueError):
        local_count_loss(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 4)), 5, 1)
    with pytest.raises(ValueError):
        local_count_loss(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 3)), 2, 1)
    with pytest.raises(ValueError):
        LossConfig(patch_stride=0)
    with pytest.raises(ValueError):
        LossConfig(lam=-1.0)


SIZES = [(h, w) for h in range(1, 9) for w in range(1, 9)]


@pytest.mark.parametrize("h,t", [(h, t) for h in (1, 2, 4) for t in (1, 2)])
def test_brute_force_equivalence_exact(h, t):
    """Every map size up to 8x8 with dyadic values: exact equality."""
    rng = np.random.default_rng(h * 10 + t)
    for hh, ww in SIZES:
        if h > min(hh, ww):
            continue
        m = 1 + (hh + ww) % 3
        d = dyadic(rng, (m, 1, hh, ww))
        q = dyadic(rng, (m, 1, hh, ww))
        assert local_count_loss(Tensor(d), q, h, t).item() == brute_local_count(d, q, h, t)
        assert euclidean_loss(Tensor(d), q).item() == brute_euclidean(d, q)
        c = patch_count_errors(d - q, h, t)
        errs = brute_patch_errors(d, q, h, t)
        assert c.size == len(errs)
        for (j, y, x), v in errs.items():
            assert c[j, y // t, x // t] == v


@pytest.mark.parametrize("h,t", [(h, t) for h in (1, 2, 3, 4) for t in (1, 2, 3)])
def test_brute_force_equivalence_general_floats(h, t):
    rng = np.random.default_rng(100 + h * 10 + t)
    for hh, ww in SIZES:
        if h > min(hh, ww):
            continue
        d = rng.random((2, 1, hh, ww))
        q = rng.random((2, 1, hh, ww))
        # patch sums accumulate in the same order as the oracle; only the final reduction differs
        np.testing.assert_allclose(local_count_loss(Tensor(d), q, h, t).item(), brute_local_count(d, q, h, t), rtol=1e-13)


def test_h1_t1_is_mean_l1(rng):
    d = rng.standard_normal((3, 1, 6, 5))
    q = rng.standard_normal((3, 1, 6, 5))
    l1 = np.mean([np.abs(d[j] - q[j]).sum() for j in range(3)])
    np.testing.assert_allclose(local_count_loss(Tensor(d), q, 1, 1).item(), l1, rtol=1e-13)


@settings(max_examples=50, deadline=None)
@given(hh=st.integers(2, 8), ww=st.integers(2, 8), h=st.integers(1, 4), t=st.integers(1, 3), seed=st.integers(0, 2**16))
def test_local_count_symmetric(hh, ww, h, t, seed):
    h = min(h, hh, ww)
    r = np.random.default_rng(seed)
    d = dyadic(r, (2, 1, hh, ww))
    q = dyadic(r, (2, 1, hh, ww))
    assert local_count_loss(Tensor(d), q, h, t).item() == local_count_loss(Tensor(q), d, h, t).item()


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 3), h=st.integers(2, 4), seed=st.integers(0, 2**16), v=st.integers(1, 64))
def test_zero_sum_dipole_invisible(n, h, seed, v):
    r = np.random.default_rng(seed)
    size = n * h
    d = dyadic(r, (1, 1, size, size))
    q = dyadic(r, (1, 1, size, size))
    base = local_count_loss(Tensor(d), q, h, h).item()
    bumped = d.copy()
    py, px = r.integers(0, n, 2) * h
    a, b = r.choice(h * h, size=2, replace=False)
    bumped[0, 0, py + a // h, px + a % h] += v / 8.0
    bumped[0, 0, py + b // h, px + b % h] -= v / 8.0
    assert local_count_loss(Tensor(bumped), q, h, h).item() == base


def test_local_count_gradient_brute_force(rng):
    # spread gradient: every pixel gets (1/M) * sum of sign(c) over patches covering it
    d = rng.standard_normal((2, 1, 7, 6))
    q = rng.standard_normal((2, 1, 7, 6))
    for h, t in [(1, 1), (2, 1), (3, 2), (4, 3), (2, 2)]:
        g = grad_of(lambda p: local_count_loss(p, q, h, t), d)
        want = np.zeros_like(d)
        for (j, y, x), c in brute_patch_errors(d, q, h, t).items():
            want[j, 0, y : y + h, x : x + h] += np.sign(c) / 2
        np.testing.assert_array_equal(g, want)


def test_zero_count_error_has_zero_subgradient():
    q = np.zeros((1, 1, 2, 2))
    d = np.array([[[[1.0, -1.0], [0.0, 0.0]]]])
    g = grad_of(lambda p: local_count_loss(p, q, 2, 1), d)
    assert not g.any()


def test_total_loss_decomposition(rng):
    d = rng.standard_normal((2, 1, 8, 8))
    q = rng.standard_normal((2, 1, 8, 8))
    rep = total_loss(Tensor(d), q, LossConfig(lam=0.0, patch_size=4, patch_stride=2))
    assert rep.total == rep.euclidean
    rep = total_loss(Tensor(d), q, LossConfig(lam=0.3, patch_size=4, patch_stride=2))
    assert rep.total == rep.euclidean + 0.3 * rep.local_count
    assert rep.patch_count_errors.shape == (2, 3, 3)
    assert LossConfig().lam == 0.0001


@pytest.mark.parametrize("seed", range(20))
def test_total_loss_gradient(seed):
    r = np.random.default_rng(seed)
    d = r.standard_normal((2, 1, 6, 6))
    q = r.standard_normal((2, 1, 6, 6))
    cfg = LossConfig(lam=[1e-4, 0.5, 2.0][seed % 3], patch_size=1 + seed % 4, patch_stride=1 + seed % 2)
    c = patch_count_errors(d - q, cfg.patch_size, cfg.patch_stride)
    assert np.abs(c).min() > 1e-4  # away from |c| = 0
    g = grad_of(lambda p: total_loss(p, q, cfg).total_tensor, d)
    num = central_difference(lambda: total_loss(Tensor(d), q, cfg).total, d)
    assert relative_error(g, num) < 1e-4


def test_mse_loss(rng):
    d = rng.standard_normal((2, 1, 3, 3))
    q = rng.standard_normal((2, 1, 3, 3))
    np.testing.assert_allclose(mse_loss(Tensor(d), q).item(), np.mean((d - q) ** 2), rtol=1e-14)
    g = grad_of(lambda p: mse_loss(p, q), d)
    assert relative_error(g, central_difference(lambda: mse_loss(Tensor(d), q).item(), d)) < 1e-4
