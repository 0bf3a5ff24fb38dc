"""Continual next-POI recommendation with a generative-key interest memory."""

__version__ = "0.1.0"
