"""Image-sequence regression with neural-ODE velocity fields."""

__version__ = "0.1.0"
