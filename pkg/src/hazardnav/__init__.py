"""Risk-controlled hazard segmentation feeding a safe lattice navigation agent."""

__version__ = "0.1.0"
