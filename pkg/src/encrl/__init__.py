"""Deep Q-learning on encrypted state observations."""

__version__ = "0.1.0"
