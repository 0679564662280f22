"""IBR penetration thresholds from dynamic contingency screening."""

__version__ = "0.1.0"
