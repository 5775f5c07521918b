"""Microscopic simulation of mixed human-driven and autonomous vehicle traffic."""
from .net import Network, load_network, load_scenario

__version__ = "0.1.0"
__all__ = ["Network", "load_network", "load_scenario", "__version__"]
