"""Simulation and inference toolkit for trapped-ion readout with integrated SPADs."""

__version__ = "0.1.0"
