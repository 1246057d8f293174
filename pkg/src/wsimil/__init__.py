"""Weakly- and fully-supervised tile classifiers for pyramidal slide images."""

__version__ = "0.1.0"
