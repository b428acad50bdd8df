"""Lane-free cruise control with Lyapunov-guarded simulation and a continuum traffic-fluid model."""

__version__ = "0.1.0"
