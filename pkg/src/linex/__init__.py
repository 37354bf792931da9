"""Linear training-dynamics analysis and extrapolation for desk-scale RLVR."""

__version__ = "0.1.0"
