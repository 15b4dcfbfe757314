"""Stackelberg trading between a shared energy storage provider and a retailer,
with VCG payments that make truthful surplus reports a dominant strategy."""

__version__ = "0.1.0"
