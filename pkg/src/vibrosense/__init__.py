"""Hidden liquid-level inference from simulated speckle vibrometry."""

__version__ = "0.1.0"
