"""Multi-task CVR modelling for rare conversions, with a desk-scale ad marketplace simulator."""

__version__ = "0.1.0"
