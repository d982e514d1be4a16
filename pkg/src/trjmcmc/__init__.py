"""Transport reversible jump MCMC."""

__version__ = "0.1.0"
