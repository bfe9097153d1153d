"""Onion-routed transaction broadcast with a deterministic linkability harness."""

__version__ = "0.1.0"
