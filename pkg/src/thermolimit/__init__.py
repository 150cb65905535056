"""Heat diffusion, resolution limits and virtual-wave reconstruction for photothermal imaging."""

__version__ = "0.1.0"
