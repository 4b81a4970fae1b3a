"""Discrete-event simulator for SFC prioritization, traffic-aware scheduling and
micro-VNF placement on a substrate network."""

__version__ = "0.1.0"
