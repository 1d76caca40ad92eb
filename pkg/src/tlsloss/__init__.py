"""Non-equilibrium TLS dielectric loss: simulation and estimation toolkit."""

__version__ = "0.1.0"
