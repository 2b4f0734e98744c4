"""Building-damage classification from pre/post disaster satellite crops."""

__version__ = "0.1.0"
