"""rwacert: synthesis and sound verification of neural reach-while-avoid
certificates for discrete-time piecewise-linear controlled systems."""

__version__ = "0.1.0"

from . import certificate, dynamics, geometry, nn, verifier

__all__ = ["certificate", "dynamics", "geometry", "nn", "verifier", "__version__"]
