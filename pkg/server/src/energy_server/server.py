"""Protocol loop of the reference energy server.

Speaks line-delimited JSON on stdio or a TCP socket, one request in flight:

    <- {"op": "hello", "v": 1}
    -> {"v": 1, "d": D, "C": C}
    <- {"v": 1, "id": n, "op": "energy", "states": [[...], ...]}
    -> {"id": n, "energies": [...]}

Malformed requests produce an error response with the echoed id (null when
the line did not parse); the connection stays alive. Responses are a pure
function of the request, so the server is stateless across requests.
"""

from __future__ import annotations

import json
import socket
import sys
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

PROTOCOL_VERSION = 1
MAX_BATCH = 4096


@dataclass
class ServerConfig:
    mode: str  # "fixture" | "toy-posterior"
    d: int
    C: int
    energy_fn: Callable[[np.ndarray], np.ndarray]
    port: Optional[int] = None  # None = stdio


def handle_line(line: str, cfg: ServerConfig) -> str:
    try:
        req = json.loads(line)
    except json.JSONDecodeError:
        return json.dumps({"id": None, "error": "parse"})
    if not isinstance(req, dict):
        return json.dumps({"id": None, "error": "parse"})
    op = req.get("op")
    if op == "hello":
        return json.dumps({"v": PROTOCOL_VERSION, "d": cfg.d, "C": cfg.C})
    req_id = req.get("id")
    if op != "energy":
        return json.dumps({"id": req_id, "error": f"unknown op {op!r}"})
    if req.get("v") != PROTOCOL_VERSION:
        return json.dumps({"id": req_id, "error": "unsupported protocol version"})
    states = req.get("states")
    try:
        arr = np.asarray(states, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[1] != cfg.d:
            raise ValueError(f"states must be (n, {cfg.d})")
        if arr.shape[0] > MAX_BATCH:
            raise ValueError(f"batch exceeds {MAX_BATCH}")
        if arr.size and (arr.min() < 1 or arr.max() > cfg.C):
            raise ValueError("symbol outside {1..C}")
        energies = cfg.energy_fn(arr)
    except (ValueError, TypeError) as exc:
        return json.dumps({"id": req_id, "error": str(exc)})
    return json.dumps({"id": req_id, "energies": [float(e) for e in energies]})


def serve_stream(read_line, write_line, cfg: ServerConfig) -> None:
    while True:
        line = read_line()
        if not line:
            break
        line = line.strip()
        if not line:
            continue
        write_line(handle_line(line, cfg))


def serve_stdio(cfg: ServerConfig) -> None:
    def write_line(text: str) -> None:
        sys.stdout.write(text + "\n")
        sys.stdout.flush()

    serve_stream(sys.stdin.readline, write_line, cfg)


def serve_tcp(cfg: ServerConfig) -> None:
    """Single-connection sequential service until the peer disconnects."""
    with socket.create_server(("127.0.0.1", cfg.port)) as srv:
        # advertise the bound port for callers that requested port 0
        print(f"listening on {srv.getsockname()[1]}", file=sys.stderr, flush=True)
        while True:
            conn, _ = srv.accept()
            with conn, conn.makefile("rw") as stream:
                serve_stream(
                    stream.readline,
                    lambda text: (stream.write(text + "\n"), stream.flush()),
                    cfg,
                )


def serve(cfg: ServerConfig) -> None:
    if cfg.port is None:
        serve_stdio(cfg)
    else:
        serve_tcp(cfg)
