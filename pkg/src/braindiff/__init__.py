"""Brain-parcel-conditioned diffusion decoding with attention interpretability."""

__version__ = "0.1.0"
