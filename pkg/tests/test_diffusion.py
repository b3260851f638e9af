import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrvq import tensor as T
from lrvq.config import DiffusionConfig, ModelConfig
from lrvq.diffusion import (
    Denoiser,
    build_schedule,
    categorical_kl,
    denoise_posterior,
    forward_noise,
    prior_loss,
    prior_terms,
    sample_tokens,
)
from lrvq.tensor import Tensor

from conftest import check_grads

MODEL = ModelConfig(d_model=8, heads=2, depth=1, ff_width=16, dtype="float64")


def schedule(steps=4, codes=3, **kw):
    return build_schedule(steps, codes, DiffusionConfig(steps=steps, **kw))


# -- oracles ---------------------------------------------------------------------

def chain_joint(sched, c0, psi):
    """``P(c_{psi-1}, c_psi | c0)`` by summing over every path c0 -> c1 -> ... -> c_psi."""
    states = sched.codes + 1
    joint = np.zeros((states, states))
    for path in itertools.product(range(states), repeat=psi):
        p, prev = 1.0, c0
        for step, cur in enumerate(path, start=1):
            p *= sched.q_step[step][prev, cur]
            prev = cur
        before = path[-2] if psi > 1 else c0
        joint[before, path[-1]] += p
    return joint


def enumerated_posterior(sched, c_psi, p0, psi):
    """``sum_c0 q(c_{psi-1} | c_psi, c0) p0(c0)`` over the clean tokens that can reach ``c_psi``."""
    out = np.zeros(sched.codes + 1)
    weight = 0.0
    for c0 in range(sched.codes):
        joint = chain_joint(sched, c0, psi)
        reach = joint[:, c_psi].sum()
        if reach <= 0:
            continue
        out += p0[c0] * joint[:, c_psi] / reach
        weight += p0[c0]
    return out / weight


# -- schedule --------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(2, 20), st.floats(0.0, 0.999), st.floats(0.0, 0.5))
def test_transition_rows_are_stochastic_and_mask_absorbs(steps, codes, final_mask, final_keep):
    if final_mask + final_keep > 1:
        final_keep = 1 - final_mask
    s = schedule(steps, codes, final_mask=final_mask, final_keep=final_keep)
    for q in (s.q_step, s.q_bar):
        assert (q >= 0).all()
        np.testing.assert_allclose(q.sum(axis=-1), 1.0, atol=1e-10)
        np.testing.assert_array_equal(q[:, codes], np.eye(codes + 1)[codes][None].repeat(steps + 1, 0))
    assert (np.diff(s.q_bar[:, :codes, codes], axis=0) >= -1e-12).all()


@pytest.mark.parametrize("steps,codes", [(4, 3), (10, 5), (100, 16)])
def test_cumulative_matrix_equals_ordered_product(steps, codes):
    s = schedule(steps, codes)
    prod = np.eye(codes + 1)
    np.testing.assert_array_equal(s.q_bar[0], prod)
    for psi in range(1, steps + 1):
        prod = prod @ s.q_step[psi]
        assert np.abs(s.q_bar[psi] - prod).max() <= 1e-8


def test_default_schedule_endpoints():
    s = schedule(100, 16)
    assert s.gamma_bar[-1] == pytest.approx(0.9)
    assert s.alpha_bar[-1] == pytest.approx(1e-5)
    assert s.q_bar[-1][0, 16] == pytest.approx(0.9)


def test_high_mask_schedule_masks_nearly_everything():
    s = schedule(50, 16, final_mask=0.995, final_keep=1e-5)
    assert (s.q_bar[-1][:16, 16] >= 0.99).all()
    rng = np.random.default_rng(0)
    c = forward_noise(rng.integers(0, 16, size=1000), 50, s, rng)
    assert (c == 16).mean() >= 0.95


def test_schedule_rejects_invalid_probabilities():
    with pytest.raises(ValueError):
        schedule(4, 3, final_mask=0.8, final_keep=0.5)
    with pytest.raises(ValueError):
        schedule(0, 3)


# -- forward process -----------------------------------------------------------------

@pytest.mark.parametrize("psi", [1, 2, 4])
def test_forward_noise_marginals_match_cumulative_rows(psi):
    s = schedule(4, 3)
    rng = np.random.default_rng(psi)
    n = 100_000
    for c0 in range(3):
        draws = forward_noise(np.full(n, c0), psi, s, rng)
        freq = np.bincount(draws, minlength=4) / n
        p = s.q_bar[psi][c0]
        sigma = np.sqrt(p * (1 - p) / n)
        assert (np.abs(freq - p) <= 3 * sigma + 1e-12).all(), (freq, p)


def test_forward_noise_identity_schedule_keeps_tokens():
    s = schedule(5, 4, final_mask=0.0, final_keep=1.0)
    c0 = np.arange(4).repeat(5)
    np.testing.assert_array_equal(forward_noise(c0, 5, s, np.random.default_rng(0)), c0)


def test_forward_noise_validates_inputs():
    s = schedule(4, 3)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        forward_noise(np.array([0, 3]), 1, s, rng)
    with pytest.raises(ValueError):
        forward_noise(np.array([0, 1]), 0, s, rng)
    with pytest.raises(ValueError):
        forward_noise(np.array([0, 1]), 5, s, rng)


# -- reverse posterior ---------------------------------------------------------------

def test_posterior_matches_exhaustive_enumeration():
    s = schedule(4, 3)
    rng = np.random.default_rng(7)
    for psi in range(1, 5):
        for c_psi in range(4):
            for _ in range(5):
                p0 = rng.dirichlet(np.ones(3))
                got = denoise_posterior(np.array([c_psi]), p0[None], psi, s).data[0]
                want = enumerated_posterior(s, c_psi, p0, psi)
                assert np.abs(got - want).max() <= 1e-10


def test_posterior_with_identity_step_concentrates_on_current_token():
    s = schedule(3, 4, final_mask=0.0, final_keep=1.0)
    p0 = np.random.default_rng(0).dirichlet(np.ones(4), size=4)
    post = denoise_posterior(np.arange(4), p0, 2, s).data
    np.testing.assert_allclose(post, np.eye(5)[:4], atol=1e-12)


def test_posterior_at_first_step_with_one_hot_prediction_is_that_token():
    s = schedule(4, 3)
    for c0 in range(3):
        for c1 in range(4):
            post = denoise_posterior(np.array([c1]), np.eye(3)[c0][None], 1, s).data[0]
            np.testing.assert_allclose(post, np.eye(4)[c0], atol=1e-12)


def test_posterior_gradient_matches_finite_differences():
    s = schedule(4, 3)
    rng = np.random.default_rng(11)
    for _ in range(20):
        c_psi = rng.integers(0, 4, size=(2, 3))
        psi = int(rng.integers(1, 5))
        logits = rng.normal(size=(2, 3, 3))
        check_grads(lambda l: denoise_posterior(c_psi, T.softmax(l, -1), psi, s), [logits], rng)


# -- KL and the prior objective ------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 6))
def test_kl_is_nonnegative_and_matches_direct_sum(seed, k):
    r = np.random.default_rng(seed)
    q = r.dirichlet(np.ones(k))
    q[r.integers(k)] = 0.0
    q /= q.sum()
    p = r.dirichlet(np.ones(k))
    got = float(categorical_kl(q, Tensor(p)).data)
    nz = q > 0
    assert got >= -1e-12
    assert got == pytest.approx(float((q[nz] * np.log(q[nz] / p[nz])).sum()), abs=1e-8)
    assert float(categorical_kl(p, Tensor(p)).data) == pytest.approx(0.0, abs=1e-12)


class FixedLogits:
    """Stands in for the denoiser: returns the same logits whatever the input."""

    def __init__(self, logits):
        self.logits = logits

    def __call__(self, tokens, psi, h_ctx, mask):
        return self.logits


@pytest.mark.parametrize("psi_value", [1, 3])
def test_prior_terms_gradient_matches_finite_differences(psi_value):
    s = schedule(4, 3)
    rng = np.random.default_rng(psi_value)
    for _ in range(20):
        c0 = rng.integers(0, 3, size=(2, 2, 3))
        psi = np.full(2, psi_value)
        c_psi = forward_noise(c0, psi[:, None, None], s, rng)
        mask = np.array([[True, True], [True, False]])
        logits = rng.normal(size=(2, 2, 3, 3))

        def build(l):
            return prior_terms(FixedLogits(l), s, c0, c_psi, psi, None, mask, 0.1).total

        check_grads(build, [logits], rng)


def test_perfect_denoiser_on_one_step_schedule_has_vanishing_loss():
    s = schedule(1, 4)
    c0 = np.array([[[0, 3, 2]]])
    c1 = forward_noise(c0, 1, s, np.random.default_rng(0))
    logits = Tensor(np.where(np.eye(4)[c0] > 0, 40.0, 0.0))
    res = prior_terms(FixedLogits(logits), s, c0, c1, np.array([1]), None, np.array([[True]]), 5e-4)
    assert float(res.total.data) < 1e-12
    assert res.accuracy == 1.0


def _tiny_denoiser(codes, steps, future_len, seed=0):
    return Denoiser(MODEL, codes, steps, future_len, np.random.default_rng(seed))


def test_monte_carlo_prior_loss_matches_exhaustive_bound():
    """Steps times the mean sampled loss equals the full bound summed over every step and noisy sequence."""
    C, L, steps = 3, 2, 3
    s = schedule(steps, C)
    net = _tiny_denoiser(C, steps, L)
    rng = np.random.default_rng(3)
    h_ctx = Tensor(rng.normal(size=(1, 1, 2, MODEL.d_model)))
    mask = np.array([[True]])
    c0 = np.array([[[2, 0]]])

    bound = 0.0
    for psi in range(1, steps + 1):
        for seq in itertools.product(range(C + 1), repeat=L):
            q = np.prod([s.q_bar[psi][c0[0, 0, t], seq[t]] for t in range(L)])
            if q == 0:
                continue
            with T.no_grad():
                p0 = T.softmax(net(np.array([[seq]]), np.array([psi]), h_ctx, mask), -1).data[0, 0]
            term = 0.0
            for t in range(L):
                p_prev = enumerated_posterior(s, seq[t], p0[t], psi)
                if psi == 1:
                    term += -np.log(p_prev[c0[0, 0, t]])
                else:
                    joint = chain_joint(s, c0[0, 0, t], psi)
                    q_post = joint[:, seq[t]] / joint[:, seq[t]].sum()
                    nz = q_post > 0
                    term += (q_post[nz] * np.log(q_post[nz] / p_prev[nz])).sum()
            bound += q * term

    n = 3000
    reps_c0 = np.repeat(c0, n, axis=0)
    reps_h = Tensor(np.repeat(h_ctx.data, n, axis=0))
    reps_mask = np.repeat(mask, n, axis=0)
    samples = []
    for chunk in range(4):
        with T.no_grad():
            psi = rng.integers(1, steps + 1, size=n)
            c_psi = forward_noise(reps_c0, psi[:, None, None], s, rng)
            logits = net(c_psi, psi, reps_h, reps_mask)
            # per-scene losses from one batched pass
            for i in range(0, n, 500):
                sl = slice(i, i + 500)
                res = prior_terms(FixedLogits(logits[sl]), s, reps_c0[sl], c_psi[sl], psi[sl], None,
                                  reps_mask[sl], 0.0)
                samples.append(float(res.total.data))
    est = steps * np.mean(samples)
    se = steps * np.std(samples) / np.sqrt(len(samples))
    assert abs(est - bound) <= 4 * se + 1e-9, (est, bound, se)


def test_prior_loss_accuracy_counts_only_real_agents():
    s = schedule(4, 3)
    c0 = np.zeros((1, 2, 3), dtype=int)
    logits = Tensor(np.tile(np.array([5.0, 0.0, 0.0]), (1, 2, 3, 1)))
    res = prior_loss(FixedLogits(logits), s, c0, None, np.array([[True, False]]), np.random.default_rng(0))
    assert res.slots == 3 and res.correct == 3


# -- denoiser and sampling ----------------------------------------------------------------

def test_denoiser_outputs_distributions(rng):
    net = _tiny_denoiser(5, 6, 4)
    tokens = rng.integers(0, 6, size=(2, 3, 4))
    logits = net(tokens, np.array([1, 6]), Tensor(rng.normal(size=(2, 3, 3, 8))), np.ones((2, 3), bool))
    assert logits.shape == (2, 3, 4, 5)
    np.testing.assert_allclose(T.softmax(logits, -1).data.sum(-1), 1.0, atol=1e-6)


def test_sampled_tokens_are_real_codes_and_reproducible(rng):
    s = schedule(6, 5)
    net = _tiny_denoiser(5, 6, 4)
    h_ctx = Tensor(rng.normal(size=(3, 2, 3, 8)))
    mask = np.array([[True, True], [True, False], [True, True]])
    a = sample_tokens(net, s, h_ctx, mask, 4, np.random.default_rng(9))
    b = sample_tokens(net, s, h_ctx, mask, 4, np.random.default_rng(9))
    assert a.shape == (3, 2, 4)
    assert ((a >= 0) & (a < 5))[mask].all()
    np.testing.assert_array_equal(a, b)


def test_one_denoising_step_draws_slots_independently(rng):
    """With one step every slot is drawn from its own posterior; the joint is the product of marginals."""
    s = schedule(1, 3)
    net = _tiny_denoiser(3, 1, 2)
    n = 20_000
    h_ctx = Tensor(np.repeat(rng.normal(size=(1, 1, 2, 8)), n, axis=0))
    mask = np.ones((n, 1), bool)
    tokens = sample_tokens(net, s, h_ctx, mask, 2, np.random.default_rng(4))[:, 0]
    with T.no_grad():
        p0 = T.softmax(net(np.full((1, 1, 2), 3), np.array([1]), Tensor(h_ctx.data[:1]), mask[:1]), -1)
    probs = denoise_posterior(np.full((1, 1, 2), 3), p0, 1, s).data[0, 0, :, :3]
    expected = np.outer(probs[0], probs[1])
    observed = np.zeros((3, 3))
    np.add.at(observed, (tokens[:, 0], tokens[:, 1]), 1.0 / n)
    sigma = np.sqrt(expected * (1 - expected) / n)
    assert (np.abs(observed - expected) <= 4 * sigma + 1e-12).all()
