"""Discrete-event simulation of detector blinding and the faked-state attack on polarization BB84."""

__version__ = "0.1.0"
