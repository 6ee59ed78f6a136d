"""Neural surrogate models of power-system components and a transient simulator to host them."""

__version__ = "0.1.0"
