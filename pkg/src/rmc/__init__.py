"""Recurrent actor-critic with a jointly trained world model and curiosity bonus."""

__version__ = "0.1.0"
