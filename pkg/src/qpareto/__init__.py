"""Multiobservable quantum control: Pareto analysis, tracking control and measurement."""

__version__ = "0.1.0"
