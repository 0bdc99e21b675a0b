"""Desk-scale laboratory for adversarially robust mixture-of-experts CNNs."""

__version__ = "0.1.0"
