"""Client side of the external-energy wire protocol.

Line-delimited JSON over a byte stream: either the stdio of a child process
or a TCP connection. Handshake first, then batched energy queries:

    -> {"op": "hello", "v": 1}
    <- {"v": 1, "d": D, "C": C}
    -> {"v": 1, "id": n, "op": "energy", "states": [[...], ...]}
    <- {"id": n, "energies": [...]}

States carry 1-based symbols; a request holds at most 4096 of them (larger
batches are split client-side). The client caches nothing.
"""

from __future__ import annotations

import json
import os
import select
import shlex
import socket
import subprocess
import time
from typing import List, Optional, Union

import numpy as np

from .errors import ProtocolError
from .targets import StateSpaceSpec, TargetEnergy

PROTOCOL_VERSION = 1
MAX_BATCH = 4096
DEFAULT_TIMEOUT = 30.0
TIMEOUT_ENV = "DDSAMPLER_RPC_TIMEOUT"


def _timeout(value: Optional[float]) -> float:
    if value is not None:
        return value
    env = os.environ.get(TIMEOUT_ENV)
    return float(env) if env else DEFAULT_TIMEOUT


class _SubprocessTransport:
    def __init__(self, cmd: Union[str, List[str]], timeout: float):
        argv = shlex.split(cmd) if isinstance(cmd, str) else list(cmd)
        self.proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0
        )
        self.timeout = timeout
        self._buf = b""

    def send_line(self, line: str) -> None:
        self.proc.stdin.write(line.encode() + b"\n")
        self.proc.stdin.flush()

    def recv_line(self) -> str:
        deadline = time.monotonic() + self.timeout
        fd = self.proc.stdout.fileno()
        while b"\n" not in self._buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise ProtocolError(f"energy server timed out after {self.timeout}s")
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                continue
            chunk = os.read(fd, 65536)
            if not chunk:
                raise ProtocolError("energy server closed the stream")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line.decode()

    def close(self) -> None:
        try:
            self.proc.stdin.close()
        except Exception:
            pass
        try:
            self.proc.wait(timeout=5)
        except Exception:
            self.proc.kill()


class _TcpTransport:
    def __init__(self, host: str, port: int, timeout: float):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.settimeout(timeout)
        self.timeout = timeout
        self._buf = b""

    def send_line(self, line: str) -> None:
        self.sock.sendall(line.encode() + b"\n")

    def recv_line(self) -> str:
        while b"\n" not in self._buf:
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout as exc:
                raise ProtocolError(f"energy server timed out after {self.timeout}s") from exc
            if not chunk:
                raise ProtocolError("energy server closed the connection")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line.decode()

    def close(self) -> None:
        self.sock.close()


class EnergySession:
    """One exclusive connection to an energy server, handshake included."""

    def __init__(self, transport, timeout: float):
        self._transport = transport
        self._next_id = 0
        self.timeout = timeout
        reply = self._roundtrip({"op": "hello", "v": PROTOCOL_VERSION})
        if reply.get("v") != PROTOCOL_VERSION:
            raise ProtocolError(
                f"protocol version mismatch: client {PROTOCOL_VERSION}, server {reply.get('v')}"
            )
        try:
            self.d = int(reply["d"])
            self.C = int(reply["C"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed hello reply: {reply!r}") from exc

    @classmethod
    def connect_command(cls, cmd, timeout: Optional[float] = None) -> "EnergySession":
        t = _timeout(timeout)
        return cls(_SubprocessTransport(cmd, t), t)

    @classmethod
    def connect_tcp(cls, address: str, timeout: Optional[float] = None) -> "EnergySession":
        host, _, port = address.rpartition(":")
        t = _timeout(timeout)
        return cls(_TcpTransport(host or "127.0.0.1", int(port), t), t)

    def _roundtrip(self, obj: dict) -> dict:
        self._transport.send_line(json.dumps(obj))
        line = self._transport.recv_line()
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"unparseable server line: {line!r}") from exc

    def query_energies(self, states: np.ndarray) -> np.ndarray:
        """Ordered energies for a batch of states (chunked at 4096)."""
        states = np.asarray(states, dtype=np.int64)
        if states.ndim == 1:
            states = states[None, :]
        out = np.empty(states.shape[0], dtype=np.float64)
        for lo in range(0, states.shape[0], MAX_BATCH):
            chunk = states[lo : lo + MAX_BATCH]
            self._next_id += 1
            req_id = self._next_id
            reply = self._roundtrip(
                {
                    "v": PROTOCOL_VERSION,
                    "id": req_id,
                    "op": "energy",
                    "states": chunk.tolist(),
                }
            )
            if reply.get("error"):
                raise ProtocolError(f"server error: {reply['error']}")
            if reply.get("id") != req_id:
                raise ProtocolError(
                    f"response id {reply.get('id')} does not match request {req_id}"
                )
            energies = np.asarray(reply.get("energies", []), dtype=np.float64)
            if energies.shape != (chunk.shape[0],):
                raise ProtocolError("energy count does not match request")
            if not np.isfinite(energies).all():
                raise ProtocolError("server returned a non-finite energy")
            out[lo : lo + chunk.shape[0]] = energies
        return out

    def close(self) -> None:
        self._transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class RemoteTarget(TargetEnergy):
    """A TargetEnergy whose values come from an energy server session."""

    def __init__(self, session: EnergySession, name: str = "remote"):
        super().__init__(StateSpaceSpec(d=session.d, C=session.C), name)
        self.session = session

    def energy(self, x: np.ndarray) -> np.ndarray:
        return self.session.query_energies(self._check(x))
