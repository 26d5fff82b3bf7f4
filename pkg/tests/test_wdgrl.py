import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wdtl import tensor as T
from wdtl import wdgrl
from wdtl.nn import OptimizerState, gradients, optimizer_step
from wdtl.tensor import DimensionError, Tensor
from wdtl.wdgrl import Critic


def _critic(d=4, hidden=6, seed=0):
    return Critic(d, hidden, rng=np.random.default_rng(seed), dtype=np.float64)


def test_critic_forward_matches_numpy():
    c = _critic()
    h = np.random.default_rng(1).normal(size=(5, 4))
    expect = np.maximum(h @ c.w1.data.T + c.b1.data, 0) @ c.w2.data[0] + c.b2.data[0]
    np.testing.assert_allclose(c(h).data, expect)
    with pytest.raises(DimensionError):
        c(np.zeros((2, 3)))


def test_wasserstein_of_identical_batches_is_zero():
    c = _critic()
    h = np.random.default_rng(2).normal(size=(8, 4))
    assert wdgrl.empirical_wasserstein(h, h, c).item() == 0.0


def test_wasserstein_antisymmetric_and_shift_invariant():
    c = _critic()
    rng = np.random.default_rng(3)
    hs, ht = rng.normal(size=(8, 4)), rng.normal(size=(6, 4))
    a = wdgrl.empirical_wasserstein(hs, ht, c).item()
    assert wdgrl.empirical_wasserstein(ht, hs, c).item() == pytest.approx(-a)
    c.b2.data += 3.7
    assert wdgrl.empirical_wasserstein(hs, ht, c).item() == pytest.approx(a)
    with pytest.raises(ValueError):
        wdgrl.empirical_wasserstein(hs[:0], ht, c)


def test_interpolates_endpoints_and_range():
    rng = np.random.default_rng(4)
    hs, ht = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    np.testing.assert_array_equal(wdgrl.interpolates(hs, ht, 0, eps=1.0), hs)
    np.testing.assert_array_equal(wdgrl.interpolates(hs, ht, 0, eps=0.0), ht)
    hr = wdgrl.interpolates(hs, ht, np.random.default_rng(0))
    # each row lies on its own segment
    t = ((hr - ht) * (hs - ht)).sum(1) / ((hs - ht) ** 2).sum(1)
    np.testing.assert_allclose(hr, t[:, None] * hs + (1 - t[:, None]) * ht, atol=1e-12)
    assert np.all((t >= 0) & (t <= 1))
    with pytest.raises(DimensionError):
        wdgrl.interpolates(hs, ht[:4], 0)


def test_penalty_zero_for_unit_norm_linear_critic():
    c = _critic(d=3, hidden=2)
    # relu(x) - relu(-x) == x, so this critic is r(h) = v . h with |v| = 1
    v = np.array([0.6, 0.8, 0.0])
    c.w1.data = np.stack([v, -v])
    c.b1.data[:] = 0
    c.w2.data = np.array([[1.0, -1.0]])
    h = np.random.default_rng(5).normal(size=(7, 3))
    assert wdgrl.gradient_penalty(h, c).item() == pytest.approx(0.0, abs=1e-24)


def test_penalty_one_for_constant_critic():
    c = _critic()
    c.w2.data[:] = 0
    h = np.random.default_rng(6).normal(size=(4, 4))
    assert wdgrl.gradient_penalty(h, c).item() == 1.0
    with pytest.raises(ValueError):
        wdgrl.gradient_penalty(h[:0], c)


def test_critic_objective_composition():
    c = _critic()
    rng = np.random.default_rng(7)
    hs, ht = rng.normal(size=(4, 4)), rng.normal(size=(4, 4)) + 1
    obj, l_wd, l_grad = wdgrl.critic_objective(hs, ht, c, rho=10.0, rng=0)
    assert obj.item() == pytest.approx(l_wd.item() - 10 * l_grad.item())
    with pytest.raises(ValueError):
        wdgrl.critic_objective(hs, ht, c, rho=-1.0)


def test_combined_loss():
    l_c, l_wd = Tensor(0.5), Tensor(2.0)
    assert wdgrl.combined_loss(l_c, l_wd, 0.0).item() == 0.5
    assert wdgrl.combined_loss(l_c, l_wd, 0.1).item() == pytest.approx(0.7)
    with pytest.raises(ValueError):
        wdgrl.combined_loss(l_c, l_wd, -0.1)


@pytest.mark.parametrize("seed", range(4))
def test_closed_form_critic_step_matches_tape(seed):
    rng = np.random.default_rng(seed)
    c = _critic(d=9, hidden=11, seed=seed)
    c.b1.data = rng.normal(size=11) * 0.3
    hs, ht = rng.normal(size=(5, 9)), rng.normal(size=(5, 9)) + 0.5
    hr = wdgrl.interpolates(hs, ht, rng)
    obj, l_wd, l_grad, grads = wdgrl.critic_objective_grads(hs, ht, hr, c, rho=10.0)
    t_obj, t_wd, t_grad = wdgrl.critic_objective(hs, ht, c, 10.0, h=wdgrl.assemble_h(hs, ht, hr))
    assert obj == pytest.approx(t_obj.item(), rel=1e-12)
    assert (l_wd, l_grad) == pytest.approx((t_wd.item(), t_grad.item()), rel=1e-12)
    tape = gradients(t_obj, c.params())
    for k in tape:
        np.testing.assert_allclose(grads[k], tape[k], rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------- oracle for the 1-D W1

def _w1_by_permutations(xs, ys):
    """Brute-force optimal matching over all permutations."""
    return min(np.mean(np.abs(xs - ys[list(p)])) for p in itertools.permutations(range(len(ys))))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6).flatmap(
    lambda n: st.tuples(st.lists(st.floats(-50, 50), min_size=n, max_size=n),
                        st.lists(st.floats(-50, 50), min_size=n, max_size=n))))
def test_w1_1d_matches_brute_force(pair):
    xs, ys = map(np.array, pair)
    assert wdgrl.w1_empirical_1d(xs, ys) == pytest.approx(_w1_by_permutations(xs, ys), abs=1e-9)


def test_w1_1d_examples_and_errors():
    assert wdgrl.w1_empirical_1d([0, 1, 2], [0, 1, 2]) == 0.0
    assert wdgrl.w1_empirical_1d(np.zeros(10), np.full(10, 2.5)) == 2.5
    with pytest.raises(ValueError):
        wdgrl.w1_empirical_1d([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        wdgrl.w1_empirical_1d([], [])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**20), d=st.floats(0.1, 3.0))
def test_critic_gap_bounded_by_w1_when_lipschitz(seed, d):
    """Any 1-Lipschitz critic's score gap is a lower bound on W1 (duality, weak side)."""
    rng = np.random.default_rng(seed)
    xs, ys = rng.normal(size=(16, 1)), rng.normal(d, 1, size=(16, 1))
    c = Critic(1, 8, rng=rng, dtype=np.float64)
    # rescale so the Lipschitz constant sum|w2 * w1| is at most one
    lip = np.abs(c.w2.data[0] * c.w1.data[:, 0]).sum()
    c.w2.data /= max(lip, 1e-12)
    gap = abs(wdgrl.empirical_wasserstein(xs, ys, c).item())
    assert gap <= wdgrl.w1_empirical_1d(xs, ys) + 1e-12


def test_critic_ascent_approaches_w1_on_shifted_gaussians():
    rng = np.random.default_rng(0)
    xs, ys = rng.normal(size=(256, 1)), rng.normal(1.0, 1, size=(256, 1))
    c = Critic(1, 64, rng=np.random.default_rng(1), dtype=np.float64)
    opt = OptimizerState("adam", 1e-2)
    for _ in range(400):
        hr = wdgrl.interpolates(ys, xs, rng)
        *_, grads = wdgrl.critic_objective_grads(ys, xs, hr, c, 10.0)
        optimizer_step(opt, c.params(), grads, "ascent")
    est = wdgrl.empirical_wasserstein(ys, xs, c).item()
    assert abs(est - wdgrl.w1_empirical_1d(xs, ys)) < 0.2
