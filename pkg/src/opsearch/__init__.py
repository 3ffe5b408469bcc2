"""Hardware-aware operator search over a grassroots space of mathematical instructions."""

__version__ = "0.1.0"
