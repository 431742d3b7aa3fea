"""Wire-protocol client against the stdio fixture server."""

import sys
from pathlib import Path

import numpy as np
import pytest

from ddsampler.errors import ProtocolError
from ddsampler.rpc import EnergySession, RemoteTarget

FIXTURE = str(Path(__file__).parent / "fixtures" / "echo_energy_server.py")


def server_cmd(*extra, d=3, C=2):
    return [sys.executable, FIXTURE, str(d), str(C), *extra]


class TestHandshake:
    def test_advertised_dims(self):
        with EnergySession.connect_command(server_cmd(d=16, C=8)) as s:
            assert (s.d, s.C) == (16, 8)

    def test_version_mismatch_refused(self):
        with pytest.raises(ProtocolError) as exc:
            EnergySession.connect_command(server_cmd("--bad-version"))
        assert "99" in str(exc.value) and "1" in str(exc.value)

    def test_unreachable_endpoint(self):
        with pytest.raises((ProtocolError, OSError)):
            EnergySession.connect_tcp("127.0.0.1:1", timeout=0.5)


class TestQueries:
    def test_sum_symbols_matches_local(self, rng):
        with EnergySession.connect_command(server_cmd(d=5, C=3)) as s:
            states = rng.integers(1, 4, size=(64, 5))
            energies = s.query_energies(states)
            assert np.array_equal(energies, states.sum(axis=1).astype(float))

    def test_batch_of_one(self):
        with EnergySession.connect_command(server_cmd()) as s:
            out = s.query_energies(np.array([[1, 2, 1]]))
            assert out.shape == (1,)
            assert out[0] == 4.0

    def test_large_batch_chunks_and_preserves_order(self, rng):
        with EnergySession.connect_command(server_cmd(d=4, C=2)) as s:
            states = rng.integers(1, 3, size=(4096 + 123, 4))
            energies = s.query_energies(states)
            assert np.array_equal(energies, states.sum(axis=1).astype(float))

    def test_id_mismatch_detected(self):
        with pytest.raises(ProtocolError):
            with EnergySession.connect_command(server_cmd("--wrong-id")) as s:
                s.query_energies(np.array([[1, 1, 1]]))

    def test_nonfinite_energy_rejected(self):
        with pytest.raises(ProtocolError):
            with EnergySession.connect_command(server_cmd("--nan-energy")) as s:
                s.query_energies(np.array([[1, 1, 1]]))

    def test_timeout(self):
        with pytest.raises(ProtocolError) as exc:
            with EnergySession.connect_command(server_cmd("--hang"), timeout=0.5) as s:
                s.query_energies(np.array([[1, 1, 1]]))
        assert "timed out" in str(exc.value)


class TestRemoteTarget:
    def test_indistinguishable_from_local(self, rng):
        with EnergySession.connect_command(server_cmd(d=6, C=4)) as s:
            target = RemoteTarget(s)
            assert (target.spec.d, target.spec.C) == (6, 4)
            states = rng.integers(1, 5, size=(200, 6))
            local = states.sum(axis=1).astype(float)
            assert np.abs(target.energy(states) - local).max() < 1e-12

    def test_timeout_env_override(self, monkeypatch):
        monkeypatch.setenv("DDSAMPLER_RPC_TIMEOUT", "0.25")
        with pytest.raises(ProtocolError) as exc:
            with EnergySession.connect_command(server_cmd("--hang")) as s:
                s.query_energies(np.array([[1, 1, 1]]))
        assert "0.25" in str(exc.value)
