"""Function-on-scalar regression for dichotomized functional responses (adaptive Monte Carlo EM)."""

__version__ = "0.1.0"
