"""Two-stage generative modelling of spatial conduit networks."""

__version__ = "0.1.0"
