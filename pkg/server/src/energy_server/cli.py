"""Command line entry point of the reference energy server."""

from __future__ import annotations

import argparse
import json
import sys

from .energies import ToyPosterior, make_fixture
from .server import ServerConfig, serve


def build_config(args) -> ServerConfig:
    if args.mode == "fixture":
        params = json.loads(args.params) if args.params else {}
        fn = make_fixture(args.fixture, args.d, args.C, params)
        return ServerConfig(mode="fixture", d=args.d, C=args.C, energy_fn=fn, port=args.port)
    if args.mode == "toy-posterior":
        if not args.config:
            raise ValueError("toy-posterior mode needs --config")
        posterior = ToyPosterior.from_file(args.config)
        return ServerConfig(
            mode="toy-posterior",
            d=posterior.d,
            C=posterior.C,
            energy_fn=posterior.energy,
            port=args.port,
        )
    raise ValueError(f"unknown mode {args.mode!r}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="energy-server", description=__doc__)
    parser.add_argument("--mode", choices=["fixture", "toy-posterior"], default="fixture")
    parser.add_argument("--fixture", default="sum-symbols",
                        help="fixture energy name (sum-symbols | ising | potts)")
    parser.add_argument("--d", type=int, default=9)
    parser.add_argument("--C", type=int, default=2)
    parser.add_argument("--params", help="JSON dict of fixture parameters (L, beta, J)")
    parser.add_argument("--config", help="toy-posterior table file")
    parser.add_argument("--port", type=int, help="listen on TCP instead of stdio")
    parser.add_argument("--stdio", action="store_true", help="serve on stdio (default)")
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        serve(cfg)
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
