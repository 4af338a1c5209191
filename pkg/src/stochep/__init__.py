"""Equilibrium-propagation training for stochastic spiking convergent RNNs."""

__version__ = "0.1.0"
