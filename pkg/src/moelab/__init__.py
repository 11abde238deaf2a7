"""Desk-scale laboratory for sparse mixture-of-experts mechanisms.

Subpackages cover routing (top-k / grouped selection and straight-through
router gradients), expert expansion, expert-parallel dispatch simulation,
a masked dual-importance-sampling policy-gradient loss, FP8/BF16 rounding
emulation, routing-trace replay, and adaptive time-series patch planning.
All numerics run in float64; every random quantity flows from an explicit
counter-based generator so runs are reproducible bit-for-bit.
"""

from moelab.core import Rng, finite_diff_grad

__all__ = ["Rng", "finite_diff_grad"]
__version__ = "0.1.0"
