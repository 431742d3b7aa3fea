"""Reference implementation of the energy-server wire protocol."""

from .energies import ToyPosterior, lattice_energy, make_fixture, sum_symbols
from .server import PROTOCOL_VERSION, ServerConfig, handle_line, serve

__all__ = [
    "PROTOCOL_VERSION",
    "ServerConfig",
    "ToyPosterior",
    "handle_line",
    "lattice_energy",
    "make_fixture",
    "serve",
    "sum_symbols",
]
