"""IPF bridge: half-fits, group LV identities, exact pushforwards."""

import itertools

import numpy as np
import pytest

from ddsampler.bridge import (
    BridgeConfig,
    BridgePair,
    _group_lv_loss,
    _net_transition_matrix,
    _reference_transition_matrix,
    exact_backward_initial,
    exact_forward_terminal,
    fit_backward_mle,
    fit_forward_lv,
    ipf_run,
)
from ddsampler.diffusion import (
    TrajectoryBatch,
    UniformKernel,
    UniformKernelParams,
    make_policy_net,
    policy_input_dim,
    policy_output_dim,
)
from ddsampler.errors import ConfigError
from ddsampler.nn import PolicyNet
from ddsampler.targets import CallableTarget, EnumerationOracle, StateSpaceSpec


def reference_net(spec, p_flip):
    """A single linear layer that reproduces the reference kernel exactly."""
    net = PolicyNet([policy_input_dim(spec), policy_output_dim(spec)])
    a = np.log((1 - p_flip) * (spec.C - 1) / p_flip)
    for i in range(spec.d):
        for c in range(spec.C):
            net.weights[0][i * spec.C + c, i * spec.C + c] = a
    return net


def kern(d=2, C=2, p_flip=0.3, n=1):
    return UniformKernel(
        StateSpaceSpec(d, C), UniformKernelParams(p_flip=p_flip, n_steps=n, C=C)
    )


class TestReferenceNet:
    def test_transition_matrix_matches_reference(self):
        k = kern(d=3, C=2, p_flip=0.25)
        oracle_states = np.array(
            list(itertools.product([1, 2], repeat=3)), dtype=np.int64
        )
        ref = _reference_transition_matrix(k, oracle_states)
        net = reference_net(k.spec, 0.25)
        learned = _net_transition_matrix(k, net, oracle_states, t=0.5)
        assert np.abs(ref - learned).max() < 1e-12
        assert np.abs(ref.sum(axis=1) - 1.0).max() < 1e-12


class TestBackwardMle:
    def test_zero_budget_no_change(self, rng):
        k = kern()
        pair = BridgePair(k, bwd_net=make_policy_net(k.spec, [8], rng=rng))
        before = pair.bwd_net.flatten()
        cfg = BridgeConfig(n_outer=1, backward_steps=0, seed=0)
        losses = fit_backward_mle(pair, lambda m, r: k.sample_p0(m, r), cfg, rng)
        assert losses == []
        assert np.array_equal(pair.bwd_net.flatten(), before)

    def test_reference_backward_objective_is_path_entropy(self, rng):
        # theta = reference, phi = reference: the expected backward
        # log-likelihood equals minus the per-position flip entropy, exactly
        # computable by enumerating all 16 (x0, x1) paths at d=2, N=1
        p_flip = 0.3
        k = kern(d=2, C=2, p_flip=p_flip, n=1)
        phi = reference_net(k.spec, p_flip)
        states = np.array(list(itertools.product([1, 2], repeat=2)), dtype=np.int64)
        total = 0.0
        for x0 in states:
            for x1 in states:
                flips = (x0 != x1).sum()
                q = (p_flip**flips) * ((1 - p_flip) ** (2 - flips))
                traj = TrajectoryBatch(
                    np.stack([x0[None, :], x1[None, :]]),
                    np.zeros((1, 1)),
                    np.zeros((1, 1)),
                )
                lp = UniformKernel.net_logprob(k, phi, traj, "bwd")[0]
                total += 0.25 * q * lp
        entropy = 2 * (0.7 * np.log(0.7) + 0.3 * np.log(0.3))
        assert np.isclose(total, entropy, atol=1e-12)

    def test_mle_recovers_delta_reverse_conditional(self, rng):
        # p0 is a point mass, so the exact reverse conditional is that point
        # with probability 1 whatever x1 is observed
        k = kern(d=1, C=2, p_flip=0.3, n=1)
        pair = BridgePair(k, bwd_net=make_policy_net(k.spec, [8], rng=rng))
        cfg = BridgeConfig(
            n_outer=1, backward_steps=500, mle_batch=64, lr=5e-2, converge_rel=0.0,
            seed=0,
        )
        p0 = lambda m, r: np.ones((m, 1), dtype=np.int64)
        fit_backward_mle(pair, p0, cfg, rng)
        from ddsampler.diffusion import encode_states
        from ddsampler.nn import softmax_rows

        for x1 in (1, 2):
            rows = softmax_rows(
                pair.bwd_net.forward(
                    encode_states(np.array([[x1]]), k.spec, np.array([1.0]))
                ).reshape(1, 2)
            )
            assert rows[0, 0] > 0.99

    def test_objective_nondecreasing_smoothed(self, rng):
        k = kern(d=3, C=2, p_flip=0.3, n=4)
        pair = BridgePair(k, bwd_net=make_policy_net(k.spec, [16], rng=rng))
        cfg = BridgeConfig(n_outer=1, backward_steps=300, mle_batch=32, seed=0)
        losses = np.array(
            fit_backward_mle(pair, lambda m, r: k.sample_p0(m, r), cfg, rng)
        )
        w = 30
        smoothed = np.convolve(losses, np.ones(w) / w, mode="valid")
        # negative log-likelihood trend never rises by more than noise
        assert smoothed[-1] <= smoothed[0] + 1e-6


class TestGroupLv:
    def _pair_with_reference_nets(self, d=2, p_flip=0.3, n=2):
        k = kern(d=d, C=2, p_flip=p_flip, n=n)
        pair = BridgePair(
            k, bwd_net=reference_net(k.spec, p_flip), fwd_net=reference_net(k.spec, p_flip)
        )
        return k, pair

    def test_identical_trajectories_zero_loss(self, rng):
        k, pair = self._pair_with_reference_nets()
        traj1 = k.rollout_forward(pair.fwd_net, 1, rng)
        states = np.repeat(traj1.states, 4, axis=1)
        traj = TrajectoryBatch(states, np.zeros((2, 4)), np.zeros((2, 4)))
        loss, _, _ = _group_lv_loss(
            pair, traj, np.full(4, 1.7), np.zeros(4, dtype=np.intp), 1
        )
        assert loss.data == 0.0

    def test_hand_computed_group_variance(self, rng):
        # with both kernels equal to the symmetric reference, the group value
        # v_j reduces to E(x_N^j) exactly, so the loss is the group variance
        # of three energies: hand arithmetic on (1, 2, 4) -> var = 14/3 - 49/9
        k, pair = self._pair_with_reference_nets(d=1, n=1)
        states = np.zeros((2, 3, 1), dtype=np.int64)
        states[0] = [[1], [1], [2]]
        states[1] = [[1], [2], [2]]
        traj = TrajectoryBatch(states, np.zeros((1, 3)), np.zeros((1, 3)))
        energies = np.array([1.0, 2.0, 4.0])
        loss, _, v = _group_lv_loss(pair, traj, energies, np.zeros(3, dtype=np.intp), 1)
        assert np.allclose(v - energies, v[0] - energies[0], atol=1e-12)
        expected = np.array([1.0, 2.0, 4.0]).var()
        assert np.isclose(loss.data, expected, atol=1e-12)

    def test_energy_constant_invariance_exact(self, rng):
        k, pair = self._pair_with_reference_nets(d=2, n=2)
        traj = k.rollout_forward(pair.fwd_net, 8, rng)
        gids = np.repeat(np.arange(2), 4)
        # dyadic energies whose group sums divide exactly: shifts are exact
        energies = np.array([1.0, 2.0, 3.0, 6.0, 0.5, 1.5, 2.5, 3.5])
        l1, _, _ = _group_lv_loss(pair, traj, energies, gids, 2)
        l2, _, _ = _group_lv_loss(pair, traj, energies + 4.0, gids, 2)
        assert l1.data == l2.data

    def test_k_traj_too_small_rejected(self):
        with pytest.raises(ConfigError):
            BridgeConfig(n_outer=1, k_traj=1)


class TestIpfRun:
    def two_mode_target(self, d=4):
        spec = StateSpaceSpec(d=d, C=2)

        def e(x):
            h1 = (x != 1).sum(axis=1)
            h2 = (x != 2).sum(axis=1)
            return 1.5 * np.minimum(h1, h2).astype(np.float64)

        return CallableTarget(spec, e, "twomode")

    def test_zero_iterations_reference_forward(self, rng):
        target = self.two_mode_target()
        k = kern(d=4, C=2, p_flip=0.3, n=8)
        cfg = BridgeConfig(n_outer=0, seed=1)
        pair, diags = ipf_run(cfg, lambda m, r: np.ones((m, 4), dtype=np.int64), target, k)
        assert pair.fwd_net is None
        assert diags == []
        # forward rollouts run under the reference process
        traj = pair.rollout_forward_from(np.ones((16, 4), dtype=np.int64), rng)
        steps = UniformKernel.reference_logprob_steps(k, traj)
        assert np.allclose(steps, traj.fwd_logp)

    def test_marginal_tvs_improve_over_iterations(self):
        target = self.two_mode_target()
        oracle = EnumerationOracle(target)
        k = kern(d=4, C=2, p_flip=0.3, n=8)
        p0_exact = np.zeros(16)
        p0_exact[0] = 1.0
        cfg = BridgeConfig(
            n_outer=3, k_traj=4, groups_per_batch=8, backward_steps=80,
            forward_steps=80, mle_batch=32, seed=5, hidden=(48, 48),
        )
        pair, diags = ipf_run(
            cfg, lambda m, r: np.ones((m, 4), dtype=np.int64), target, k,
            oracle=oracle, p0_exact=p0_exact,
        )
        assert diags[-1].tv_forward_terminal < diags[0].tv_forward_terminal + 0.05
        assert diags[-1].tv_backward_initial < 0.35

    def test_exact_pushforward_with_reference_nets(self, rng):
        # reference nets in both directions: forward terminal pushforward of
        # the uniform start is uniform again (doubly stochastic kernel)
        k = kern(d=3, C=2, p_flip=0.2, n=3)
        pair = BridgePair(
            k, bwd_net=reference_net(k.spec, 0.2), fwd_net=reference_net(k.spec, 0.2)
        )
        states = np.array(list(itertools.product([1, 2], repeat=3)), dtype=np.int64)
        uniform = np.full(8, 1 / 8)
        fwd = exact_forward_terminal(pair, states, uniform)
        assert np.abs(fwd - uniform).max() < 1e-12
        bwd = exact_backward_initial(pair, states, uniform)
        assert np.abs(bwd - uniform).max() < 1e-12
