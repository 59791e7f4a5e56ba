"""Multi-time-scale phasor simulation with bifurcation analysis."""

__version__ = "0.1.0"
