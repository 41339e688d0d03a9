"""Bootstrap tests of functional inequalities using one-sided L_p statistics."""

__version__ = "0.1.0"
