"""Uncertainty propagation for hybrid neural ODE/PDE models.

The package rolls diagonal-Gaussian state estimates through partially known
dynamics (known terms via unscented transforms and linear rules, unknown
terms via moment-aware MLP surrogates), trains by exact-gradient NLL on a
hand-built tape, and quantifies parameter uncertainty with SWAG statistics
collected across an SGD ensemble.
"""

__version__ = "0.1.0"
