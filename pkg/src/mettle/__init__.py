"""Mettle: desk-scale meta-token adaptation lab on a frozen-backbone tape engine."""

__version__ = "0.1.0"
