"""Masked and uniform kernels: exact log-probs, outcome sums, rollouts."""

import itertools

import numpy as np
import pytest

from ddsampler.diffusion import (
    MASK,
    MaskedKernel,
    MaskingSchedule,
    UniformKernel,
    UniformKernelParams,
    encode_states,
    make_policy_net,
    masked_backward_step,
    masked_forward_step,
    uniform_backward_step,
    uniform_logprob,
)
from ddsampler.errors import ConfigError, ScheduleError
from ddsampler.nn import PolicyNet, softmax_rows
from ddsampler.targets import StateSpaceSpec

from helpers import chi_square_pvalue
from oracles import exact_masked_terminal_marginal

MASKED_SPEC = StateSpaceSpec(d=4, C=2, has_mask=True)


def uniform_net(spec):
    """Zero-initialised policy emits uniform categorical rows."""
    return make_policy_net(spec, [8])


class TestMaskedBackward:
    def test_fully_masking_step_logprob_zero(self, rng):
        x = np.array([[1, 2, 1, 2]])
        out, lp = masked_backward_step(x, 4, rng)
        assert (out == MASK).all()
        assert lp[0] == 0.0

    def test_single_mask_uniform_choice(self, rng):
        x = np.tile([1, 2, 1], (30000, 1))
        out, lp = masked_backward_step(x, 1, rng)
        assert np.allclose(lp, -np.log(3))
        counts = (out == MASK).sum(axis=0)
        p = chi_square_pvalue(counts, np.full(3, 1 / 3))
        assert p > 0.01

    def test_binomial_logprob(self, rng):
        x = np.array([[1, MASK, 2, MASK, 1]])
        out, lp = masked_backward_step(x, 2, rng)
        assert np.isclose(lp[0], -np.log(3.0))  # C(3, 2) = 3
        assert (out == MASK).sum() == 4

    def test_too_few_unmasked(self, rng):
        x = np.array([[MASK, MASK, 1, 2]])
        with pytest.raises(ScheduleError):
            masked_backward_step(x, 3, rng)


class TestMaskedForward:
    def test_single_position_value_prob(self, rng):
        spec = StateSpaceSpec(d=1, C=2, has_mask=True)
        net = PolicyNet([4, 2])
        net.biases[-1][...] = np.log([0.25, 0.75])
        x = np.full((20000, 1), MASK)
        out, lp = masked_forward_step(x, 1, net, 0.0, spec, rng)
        got2 = out[:, 0] == 2
        assert np.allclose(lp[got2], np.log(0.75))
        assert np.allclose(lp[~got2], np.log(0.25))
        assert abs(got2.mean() - 0.75) < 0.01

    def test_two_masked_full_unmask_uniform(self, rng):
        spec = StateSpaceSpec(d=2, C=2, has_mask=True)
        net = uniform_net(spec)
        x = np.full((64, 2), MASK)
        out, lp = masked_forward_step(x, 2, net, 0.0, spec, rng)
        assert np.allclose(lp, -np.log(4.0))
        assert (out != MASK).all()

    def test_outcomes_sum_to_one(self, rng):
        # d=3 fully masked, k=1: enumerate all (position, value) outcomes
        spec = StateSpaceSpec(d=3, C=2, has_mask=True)
        net = make_policy_net(spec, [6], rng=rng)
        net.weights[-1][...] = rng.normal(0, 0.5, net.weights[-1].shape)
        x = np.full((1, 3), MASK)
        logits = net.forward(encode_states(x, spec, np.array([0.0]))).reshape(3, 2)
        rows = softmax_rows(logits)
        total = sum(rows[i, v] / 3 for i in range(3) for v in range(2))
        assert np.isclose(total, 1.0, atol=1e-12)

    def test_too_few_masked(self, rng):
        spec = StateSpaceSpec(d=2, C=2, has_mask=True)
        net = uniform_net(spec)
        with pytest.raises(ScheduleError):
            masked_forward_step(np.array([[1, MASK]]), 2, net, 0.0, spec, rng)


class TestSchedules:
    def test_fixed_schedule_must_sum_to_d(self, rng):
        sched = MaskingSchedule.fixed([2, 1])
        with pytest.raises(ConfigError):
            sched.realise_batch(4, 4, rng)

    def test_random_schedule_sums_to_d(self, rng):
        sched = MaskingSchedule.uniform_random(1, 3)
        counts, n_steps = sched.realise_batch(200, 7, rng)
        assert (counts.sum(axis=0) == 7).all()
        assert (counts >= 0).all()
        # nonzero entries come before the padding
        for m in range(200):
            col = counts[:, m]
            nz = np.flatnonzero(col)
            assert nz.size == n_steps[m]
            assert (col[: n_steps[m]] > 0).all()

    def test_deterministic_when_kmin_equals_kmax(self, rng):
        sched = MaskingSchedule.uniform_random(2, 2)
        counts, n_steps = sched.realise_batch(5, 9, rng)
        assert (n_steps == 5).all()
        assert counts[:, 0].tolist() == [2, 2, 2, 2, 1]


class TestRollouts:
    def test_backward_reaches_fully_masked(self, rng):
        kern = MaskedKernel(MASKED_SPEC, MaskingSchedule.fixed([1, 1, 1, 1]))
        xn = rng.integers(1, 3, size=(50, 4))
        traj = kern.rollout_backward(xn, rng)
        assert (traj.x0 == MASK).all()
        assert (traj.xn == xn).all()

    def test_forward_single_step_trajectory(self, rng):
        spec = StateSpaceSpec(d=2, C=2, has_mask=True)
        kern = MaskedKernel(spec, MaskingSchedule.fixed([2]))
        net = uniform_net(spec)
        traj = kern.rollout_forward(net, 8, rng)
        assert traj.n_transitions == 1
        assert np.allclose(traj.fwd_total(), -np.log(4.0))

    def test_recorded_fwd_logp_matches_reevaluation(self, rng):
        spec = StateSpaceSpec(d=5, C=3, has_mask=True)
        kern = MaskedKernel(spec, MaskingSchedule.uniform_random(1, 3))
        net = make_policy_net(spec, [16], rng=rng)
        net.weights[-1][...] = rng.normal(0, 0.3, net.weights[-1].shape)
        traj = kern.rollout_forward(net, 40, rng)
        again = kern.forward_logprob(net, traj)
        assert np.abs(again - traj.fwd_total()).max() < 1e-10

    def test_support_compatibility(self, rng):
        # noising rollouts have finite forward log-prob and vice versa
        spec = StateSpaceSpec(d=4, C=2, has_mask=True)
        kern = MaskedKernel(spec, MaskingSchedule.fixed([2, 1, 1]))
        net = uniform_net(spec)
        back = kern.rollout_backward(rng.integers(1, 3, size=(20, 4)), rng, net=net)
        assert np.isfinite(back.fwd_logp).all()
        fwd = kern.rollout_forward(net, 20, rng)
        assert np.isfinite(fwd.bwd_logp).all()

    def test_taped_matches_plain(self, rng):
        from ddsampler.nn import GradTape

        spec = StateSpaceSpec(d=5, C=2, has_mask=True)
        kern = MaskedKernel(spec, MaskingSchedule.uniform_random(1, 2))
        net = make_policy_net(spec, [12], rng=rng)
        net.weights[-1][...] = rng.normal(0, 0.4, net.weights[-1].shape)
        traj = kern.rollout_forward(net, 16, rng)
        taped = kern.taped_forward_logprob(GradTape(net), traj)
        assert np.abs(taped.data - traj.fwd_total()).max() < 1e-10


class TestUniformKernel:
    PARAMS = UniformKernelParams(p_flip=0.1, n_steps=3, C=2)

    def test_no_change_logprob(self):
        a = np.array([[1, 2], [2, 2]])
        assert np.allclose(uniform_logprob(a, a, self.PARAMS), 2 * np.log(0.9))

    def test_binary_flip_logprob(self):
        p = UniformKernelParams(p_flip=0.1, n_steps=1, C=2)
        assert np.isclose(uniform_logprob(np.array([[1]]), np.array([[2]]), p), np.log(0.1))

    def test_categorical_change_logprob_and_outcome_sum(self):
        p = UniformKernelParams(p_flip=0.3, n_steps=1, C=4)
        lp = uniform_logprob(np.array([[2]]), np.array([[4]]), p)
        assert np.isclose(lp, np.log(0.1))
        total = sum(
            np.exp(uniform_logprob(np.array([[2]]), np.array([[v]]), p))
            for v in range(1, 5)
        )
        assert np.isclose(total, 1.0, atol=1e-12)

    def test_backward_step_logprob_consistency(self, rng):
        x = rng.integers(1, 3, size=(500, 4))
        p = UniformKernelParams(p_flip=0.25, n_steps=1, C=2)
        out, lp = uniform_backward_step(x, p, rng)
        assert np.allclose(lp, uniform_logprob(out, x, p))

    def test_pflip_half_mixes_in_one_step(self, rng):
        # binary p_flip = 0.5 resamples uniformly: X0 from backward rollouts
        # is uniform regardless of the start
        spec = StateSpaceSpec(d=4, C=2)
        kern = UniformKernel(spec, UniformKernelParams(p_flip=0.5, n_steps=1, C=2))
        xn = np.tile([1, 1, 1, 1], (100_000, 1))
        traj = kern.rollout_backward(xn, rng)
        idx = ((traj.x0 - 1) * (2 ** np.arange(3, -1, -1))).sum(axis=1)
        counts = np.bincount(idx, minlength=16)
        assert chi_square_pvalue(counts, np.full(16, 1 / 16)) > 0.01

    def test_mask_rejected(self):
        with pytest.raises(ConfigError):
            UniformKernel(
                StateSpaceSpec(d=2, C=2, has_mask=True),
                UniformKernelParams(p_flip=0.2, n_steps=2, C=2),
            )


class TestRetiming:
    def test_retimed_same_schedule_identical(self, rng):
        spec = StateSpaceSpec(d=3, C=2, has_mask=True)
        kern = MaskedKernel(spec, MaskingSchedule.single_step(3))
        net = make_policy_net(spec, [8], rng=rng)
        m1 = exact_masked_terminal_marginal(net, spec, [1, 1, 1])
        retimed = kern.retimed()
        counts, _ = retimed.schedule.realise_batch(1, 3, rng)
        m2 = exact_masked_terminal_marginal(net, spec, counts[:, 0].tolist())
        assert np.allclose(m1, m2)

    def test_retimed_outcome_probabilities_sum_to_one(self, rng):
        spec = StateSpaceSpec(d=3, C=2, has_mask=True)
        net = make_policy_net(spec, [8], rng=rng)
        net.weights[-1][...] = rng.normal(0, 0.5, net.weights[-1].shape)
        marginal = exact_masked_terminal_marginal(net, spec, [1, 1, 1])
        assert np.isclose(marginal.sum(), 1.0, atol=1e-12)

    def test_multi_unmask_terminal_marginal_enumeration(self, rng):
        # the k=d single-shot marginal factorises over positions; check the
        # exhaustive expansion against the direct product
        spec = StateSpaceSpec(d=3, C=2, has_mask=True)
        net = make_policy_net(spec, [8], rng=rng)
        net.weights[-1][...] = rng.normal(0, 0.7, net.weights[-1].shape)
        marginal = exact_masked_terminal_marginal(net, spec, [3])
        x = np.full((1, 3), MASK)
        rows = softmax_rows(
            net.forward(encode_states(x, spec, np.array([0.0]))).reshape(3, 2)
        )
        direct = np.array(
            [
                rows[0, a] * rows[1, b] * rows[2, c]
                for a, b, c in itertools.product(range(2), repeat=3)
            ]
        )
        assert np.allclose(marginal, direct, atol=1e-12)


def test_trajectory_dump(tmp_path, rng):
    spec = StateSpaceSpec(d=3, C=2, has_mask=True)
    kern = MaskedKernel(spec, MaskingSchedule.single_step(3))
    net = uniform_net(spec)
    traj = kern.rollout_forward(net, 2, rng)
    path = tmp_path / "traj.txt"
    traj.dump(path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 2 * 3
    assert all("fwd=" in ln and "bwd=" in ln for ln in lines)
