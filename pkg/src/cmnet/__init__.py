"""Collaborative memory network for joint slot filling and intent detection."""

__version__ = "0.1.0"
