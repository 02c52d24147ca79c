"""Floquet band gaps of a Dirichlet waveguide with a small periodic cavern."""

__version__ = "0.1.0"
