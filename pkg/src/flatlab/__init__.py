"""Sharpness, flat minima and generalization in two-layer networks.

Closed-form flattest interpolants, exact and oracle Hessian-trace
computations, SAM/GD training loops, and an experiment harness.
"""

__version__ = "0.1.0"
