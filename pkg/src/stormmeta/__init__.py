"""Desk-scale lab for few-shot multi-task image-to-image translation on storm events."""

__version__ = "0.1.0"
