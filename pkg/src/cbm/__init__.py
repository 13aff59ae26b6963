"""Causal bisimulation modeling on synthetic factored MDPs."""

__version__ = "0.1.0"
