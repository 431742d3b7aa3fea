"""A11 -- protocol fidelity and outsourced posterior sampling end to end.

These tests exercise the reference server through the sampler toolkit's
public surfaces only: the wire protocol and the command line.
"""

import json
import shlex
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from ddsampler import config as cfgmod
from ddsampler.cli import main as ddsampler_main
from ddsampler.diffusion import MaskedKernel, MaskingSchedule
from ddsampler.metrics import forward_terminal_samples
from ddsampler.objectives import LossConfig
from ddsampler.rpc import EnergySession, RemoteTarget
from ddsampler.targets import LatticeParams, LatticeTarget, StateSpaceSpec
from ddsampler.training import TrainConfig, run

from energy_server.energies import ToyPosterior

SERVER = [sys.executable, "-m", "energy_server.cli"]


def ising_server_cmd():
    return SERVER + [
        "--mode", "fixture", "--fixture", "ising", "--d", "9", "--C", "2",
        "--params", '{"L":3,"beta":0.6}',
    ]


def report(name, ok, detail):
    print(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


class TestA11Fidelity:
    def test_fixture_matches_in_process_on_random_sweep(self, rng):
        local = LatticeTarget(LatticeParams.ising(3, 0.6))
        with EnergySession.connect_command(ising_server_cmd()) as session:
            remote = RemoteTarget(session)
            states = rng.integers(1, 3, size=(10_000, 9))
            diff = np.abs(remote.energy(states) - local.energy(states)).max()
        report("A11-sweep", diff <= 1e-12, f"max |remote - local| = {diff:.2e} over 1e4 states")

    def test_serve_fixture_check_cli(self, tmp_path):
        cfg = {"target": {"name": "ising", "L": 3, "beta": 0.6}}
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        rc = ddsampler_main([
            "serve-fixture-check", "--config", str(cfg_path),
            "--energy-cmd", shlex.join(ising_server_cmd()), "--sweep", "10000",
        ])
        report("A11-cli-check", rc == 0, f"serve-fixture-check exit code {rc}")

    def test_identical_metric_csv_remote_vs_local(self, tmp_path):
        cfg = {
            "seed": 11,
            "target": {"name": "ising", "L": 3, "beta": 0.6},
            "kernel": {"type": "masked", "k_min": 1, "k_max": 1},
            "net": {"hidden": [32]},
            "train": {
                "loss": "tb",
                "strategy": "buffer+mcmc",
                "epochs": 60,
                "batch_size": 16,
                "buffer_size": 512,
                "off_to_on_ratio": "2",
                "mcmc_sample_ratio": 0.2,
                "mcmc_interval": 20,
                "mcmc_steps": 5,
                "mcmc_kernel": "sw",
                "learning_rate": 1e-3,
                "annealing": True,
                "eval_every": 30,
                "eval_samples": 128,
            },
        }
        cfg_path = tmp_path / "cfg.json"
        cfgmod.dump_config(cfg, cfg_path)
        out_local = tmp_path / "local"
        out_remote = tmp_path / "remote"
        assert ddsampler_main(["train", "--config", str(cfg_path), "--out", str(out_local)]) == 0
        assert ddsampler_main([
            "train", "--config", str(cfg_path), "--out", str(out_remote),
            "--energy-cmd", shlex.join(ising_server_cmd()),
        ]) == 0
        rows_local = (out_local / "metrics.csv").read_text().strip().splitlines()
        rows_remote = (out_remote / "metrics.csv").read_text().strip().splitlines()
        assert rows_local[0] == rows_remote[0]
        worst = 0.0
        for a, b in zip(rows_local[1:], rows_remote[1:]):
            for va, vb in zip(a.split(","), b.split(",")):
                if va in ("", "True", "False") or vb in ("", "True", "False"):
                    assert va == vb
                    continue
                worst = max(worst, abs(float(va) - float(vb)))
        report("A11-csv", worst <= 1e-9, f"max metric CSV difference {worst:.2e}")


@pytest.fixture(scope="module")
def posterior_path(tmp_path_factory):
    # 81-state toy posterior: prior tilts toward low indices, the
    # likelihood of the observed class rewards states with many 3s
    tmp = tmp_path_factory.mktemp("posterior")
    rng = np.random.default_rng(42)
    d, C = 4, 3
    n = C**d
    p_latent = rng.uniform(0.2, 1.0, size=n)
    states = np.array(
        [[(i // C**k) % C for k in range(d - 1, -1, -1)] for i in range(n)]
    )
    decode = np.minimum((states == 2).sum(axis=1), 3)
    likelihood = [
        [0.6, 0.3, 0.15, 0.05],
        [0.05, 0.15, 0.45, 0.85],
    ]
    path = tmp / "posterior.json"
    path.write_text(
        json.dumps(
            {
                "d": d,
                "C": C,
                "p_latent": p_latent.tolist(),
                "decode": decode.tolist(),
                "likelihood": likelihood,
                "observed_y": 1,
            }
        )
    )
    return path


class TestA11ToyPosterior:
    def test_trained_sampler_matches_enumerated_posterior(self, posterior_path):
        exact = ToyPosterior.from_file(posterior_path).posterior_table()
        cmd = SERVER + ["--mode", "toy-posterior", "--config", str(posterior_path)]
        with EnergySession.connect_command(cmd) as session:
            target = RemoteTarget(session, name="toy-posterior")
            spec = StateSpaceSpec(d=4, C=3, has_mask=True)
            kern = MaskedKernel(spec, MaskingSchedule.single_step(4))
            cfg = TrainConfig(
                n_epochs=1500,
                batch_m=64,
                buffer_capacity=4096,
                loss=LossConfig("tb"),
                ratio_r=Fraction(2),
                mcmc_kind="categorical",
                mcmc_stay_prob=0.8,
                mcmc_interval=100,
                mcmc_steps=20,
                mcmc_ratio=0.2,
                annealing=True,
                seed=0,
            )
            state = run(cfg, target, kern, hidden=(96, 96))
            rng = np.random.default_rng(77)
            samples = forward_terminal_samples(state.net, kern, 100_000, rng)
        powers = 3 ** np.arange(3, -1, -1)
        idx = ((samples - 1) * powers[None, :]).sum(axis=1)
        emp = np.bincount(idx, minlength=81) / samples.shape[0]
        tv = 0.5 * np.abs(emp - exact).sum()
        report("A11-posterior", tv < 0.05, f"TV(sampler, enumerated posterior) = {tv:.4f}")
