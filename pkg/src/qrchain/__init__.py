"""Capacity planning and deterministic simulation for a QKD-keyed consortium ledger."""

__version__ = "0.1.0"
