"""Portfolio optimization under ratio-type periodic evaluation."""

__version__ = "0.1.0"
