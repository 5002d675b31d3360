"""Sample-size calculation and Monte Carlo power verification for A/B tests."""

__version__ = "0.1.0"
