"""MCMC kernels: stationarity, symmetry, cluster moves."""

import itertools

import numpy as np
import pytest

from ddsampler.errors import ConfigError
from ddsampler.mcmc import (
    categorical_mcmc_step,
    make_step_fn,
    mh_hamming_step,
    refine_batch,
    run_chains,
    swendsen_wang_step,
)
from ddsampler.targets import (
    CallableTarget,
    EnumerationOracle,
    LatticeParams,
    LatticeTarget,
    StateSpaceSpec,
)

from helpers import chi_square_pvalue


def invariance_check(oracle, step, rng, n=100_000):
    """Exact-start invariance: one kernel step preserves the target."""
    start = oracle.sample(n, rng)
    after = step(start, rng)
    counts = np.bincount(oracle.state_index(after), minlength=oracle.n_states)
    return chi_square_pvalue(counts, oracle.probs)


class TestMhHamming:
    def test_constant_energy_always_accepts(self, rng):
        spec = StateSpaceSpec(d=5, C=3)
        target = CallableTarget(spec, lambda x: np.zeros(x.shape[0]), "flat")
        x = np.ones((2000, 5), dtype=np.int64)
        y = mh_hamming_step(x, target, 1, rng)
        # proposal always changes exactly one coordinate; all accepted
        assert ((y != x).sum(axis=1) == 1).all()

    def test_two_state_stationary_distribution(self, rng):
        spec = StateSpaceSpec(d=1, C=2)
        target = CallableTarget(
            spec, lambda x: np.where(x[:, 0] == 1, 0.0, np.log(2.0)), "two"
        )
        x = np.ones((1, 1), dtype=np.int64)
        hits = 0
        steps = 100_000
        batch = np.ones((100, 1), dtype=np.int64)
        count1 = 0
        for _ in range(steps // 100):
            batch = mh_hamming_step(batch, target, 1, rng)
            count1 += (batch[:, 0] == 1).sum()
        freq1 = count1 / steps
        assert abs(freq1 - 2 / 3) < 0.02

    def test_invariance_on_ising(self, rng):
        target = LatticeTarget(LatticeParams.ising(3, 0.6))
        oracle = EnumerationOracle(target)
        p = invariance_check(oracle, lambda s, r: mh_hamming_step(s, target, 1, r), rng)
        assert p > 0.01

    def test_long_chain_magnetisation_vs_oracle(self, rng):
        target = LatticeTarget(LatticeParams.ising(3, 0.6))
        oracle = EnumerationOracle(target)
        spins = 2.0 * (oracle.states.astype(np.float64) - 1.5)
        exact_abs_mag = oracle.expectation(np.abs(spins.mean(axis=1)))
        chains = rng.integers(1, 3, size=(64, 9))
        vals = []
        for _ in range(3000):
            chains = mh_hamming_step(chains, target, 1, rng)
            vals.append(np.abs((2.0 * (chains - 1.5)).mean(axis=1)))
        vals = np.array(vals[500:])
        est = vals.mean()
        se = vals.mean(axis=1).std(ddof=1) / np.sqrt(len(vals) / 10)  # crude ess
        assert abs(est - exact_abs_mag) < max(3 * se, 0.02)


class TestSwendsenWang:
    def test_beta_zero_limit_resamples_uniformly(self, rng):
        params = LatticeParams.potts(3, 3, beta=1e-8)
        x = np.ones((5000, 9), dtype=np.int64)
        y = swendsen_wang_step(x, params, rng)
        counts = np.bincount(y.reshape(-1) - 1, minlength=3)
        assert chi_square_pvalue(counts, np.full(3, 1 / 3)) > 0.01

    def test_shape_and_range_preserved(self, rng):
        params = LatticeParams.potts(4, 3, beta=1.0)
        x = rng.integers(1, 4, size=(10, 16))
        y = swendsen_wang_step(x, params, rng)
        assert y.shape == x.shape
        assert y.min() >= 1 and y.max() <= 3

    def test_invariance_on_potts(self, rng):
        target = LatticeTarget(LatticeParams.potts(2, 3, beta=1.005))
        oracle = EnumerationOracle(target)
        p = invariance_check(
            oracle, lambda s, r: swendsen_wang_step(s, target.params, r), rng
        )
        assert p > 0.01

    def test_detailed_balance_2x2(self, rng):
        # estimate P(a->b) and P(b->a) from many single steps; detailed
        # balance pi(a) P(a->b) = pi(b) P(b->a) within MC error
        params = LatticeParams.ising(2, 0.7)
        target = LatticeTarget(params)
        oracle = EnumerationOracle(target)
        a = np.array([1, 1, 2, 2])
        b = np.array([1, 1, 1, 2])
        n = 400_000
        outs_a = swendsen_wang_step(np.tile(a, (n, 1)), params, rng)
        outs_b = swendsen_wang_step(np.tile(b, (n, 1)), params, rng)
        p_ab = (outs_a == b).all(axis=1).mean()
        p_ba = (outs_b == a).all(axis=1).mean()
        ia, ib = oracle.state_index(a[None, :])[0], oracle.state_index(b[None, :])[0]
        lhs = oracle.probs[ia] * p_ab
        rhs = oracle.probs[ib] * p_ba
        se = np.sqrt(
            (oracle.probs[ia] ** 2) * p_ab * (1 - p_ab) / n
            + (oracle.probs[ib] ** 2) * p_ba * (1 - p_ba) / n
        )
        assert abs(lhs - rhs) < 4 * se + 1e-6

    def test_requires_lattice(self):
        spec = StateSpaceSpec(d=4, C=2)
        target = CallableTarget(spec, lambda x: np.zeros(x.shape[0]), "flat")
        with pytest.raises(ConfigError):
            make_step_fn("sw", target)


class TestCategorical:
    def test_stay_prob_near_one_rarely_moves(self, rng):
        spec = StateSpaceSpec(d=3, C=8)
        target = CallableTarget(spec, lambda x: np.zeros(x.shape[0]), "flat")
        x = np.ones((4000, 3), dtype=np.int64)
        y = categorical_mcmc_step(x, target, 0.999, rng)
        assert (y != x).mean() < 0.01

    def test_constant_energy_acceptance_one(self, rng):
        spec = StateSpaceSpec(d=2, C=4)
        target = CallableTarget(spec, lambda x: np.zeros(x.shape[0]), "flat")
        x = np.ones((50_000, 2), dtype=np.int64)
        y = categorical_mcmc_step(x, target, 0.5, rng)
        # each entry independently stays w.p. 0.5 or moves to one of 3 others
        moved = (y != x).mean()
        assert abs(moved - 0.5) < 0.01

    def test_invariance_on_toy_energy(self, rng):
        spec = StateSpaceSpec(d=2, C=8)
        rng0 = np.random.default_rng(7)
        table = rng0.normal(size=64)
        target = CallableTarget(
            spec, lambda x: table[(x[:, 0] - 1) * 8 + (x[:, 1] - 1)], "toy"
        )
        oracle = EnumerationOracle(target)
        p = invariance_check(
            oracle, lambda s, r: categorical_mcmc_step(s, target, 0.9, r), rng
        )
        assert p > 0.01

    def test_stationary_frequencies_long_chain(self, rng):
        spec = StateSpaceSpec(d=2, C=8)
        rng0 = np.random.default_rng(3)
        table = rng0.normal(size=64)
        target = CallableTarget(
            spec, lambda x: table[(x[:, 0] - 1) * 8 + (x[:, 1] - 1)], "toy"
        )
        oracle = EnumerationOracle(target)
        chains = oracle.sample(512, rng)
        counts = np.zeros(64)
        for _ in range(200):
            chains = categorical_mcmc_step(chains, target, 0.8, rng)
            counts += np.bincount(oracle.state_index(chains), minlength=64)
        freq = counts / counts.sum()
        # loose 3-sigma-style bound with correlated draws
        assert np.abs(freq - oracle.probs).max() < 0.02


class TestRefine:
    def test_zero_steps_identity(self, rng):
        spec = StateSpaceSpec(d=3, C=2)
        target = CallableTarget(spec, lambda x: x.sum(axis=1).astype(float), "sum")
        states = rng.integers(1, 3, size=(20, 3))
        step = make_step_fn("mh", target, H=1)
        out = refine_batch(states, step, 0, rng)
        assert np.array_equal(out, states)

    def test_returns_batch_of_final_states(self, rng):
        spec = StateSpaceSpec(d=3, C=2)
        target = CallableTarget(spec, lambda x: x.sum(axis=1).astype(float), "sum")
        states = rng.integers(1, 3, size=(128, 3))
        step = make_step_fn("mh", target, H=1)
        out = refine_batch(states, step, 100, rng)
        assert out.shape == (128, 3)

    def test_refinement_decreases_energy_on_cold_unimodal_target(self, rng):
        spec = StateSpaceSpec(d=6, C=2)
        target = CallableTarget(
            spec, lambda x: 4.0 * (x != 1).sum(axis=1).astype(float), "cold"
        )
        diffs = []
        for _ in range(10):
            states = rng.integers(1, 3, size=(64, 6))
            step = make_step_fn("mh", target, H=1)
            refined = refine_batch(states, step, 50, rng)
            diffs.append(
                target.energy(refined).mean() - target.energy(states).mean()
            )
        diffs = np.array(diffs)
        assert diffs.mean() < 3 * diffs.std(ddof=1) / np.sqrt(len(diffs))


def test_run_chains_collects_thinned_samples(rng):
    spec = StateSpaceSpec(d=2, C=2)
    target = CallableTarget(spec, lambda x: np.zeros(x.shape[0]), "flat")
    step = make_step_fn("mh", target, H=1)
    init = np.ones((4, 2), dtype=np.int64)
    out = run_chains(init, step, burn_in=5, n_samples_per_chain=3, thinning=2, rng=rng)
    assert out.shape == (12, 2)
