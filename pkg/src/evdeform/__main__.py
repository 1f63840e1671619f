"""Module entry point for python -m evdeform."""

from .cli import entry

entry()
