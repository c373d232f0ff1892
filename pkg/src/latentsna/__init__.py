"""Joint Bayesian modeling of weighted networks and multivariate nodal attributes."""

__version__ = "0.1.0"
