"""Joint space partitioning and minimum-cost flow by dual supergradient ascent."""
__version__ = "0.1.0"
