"""Waveguide-QED toolkit: collectively coupled two-level emitters driven
through a 1D waveguide, photon correlation functions by quantum regression,
Monte-Carlo photon streams, and time-tag analysis."""

__version__ = "0.1.0"
