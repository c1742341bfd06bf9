"""Battery aging-verification pipeline built on the 9-step fast-charge protocol."""

__version__ = "0.1.0"
