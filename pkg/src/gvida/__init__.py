"""Domain adaptation with class-conditional variational priors and a global codebook, at desk scale."""

__version__ = "0.1.0"
