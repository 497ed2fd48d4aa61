"""Unsupervised energy-efficient power control with stochastic boxes and
permutation-equivariant interference networks."""

__version__ = "0.1.0"

from . import chanmodel, diffcore, inet, objective, oracle, trainer  # noqa: E402,F401
