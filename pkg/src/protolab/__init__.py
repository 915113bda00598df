"""Prototype part networks on a numpy autodiff engine, with location-shift
attacks, JPEG-style corruption studies and a reproducible CLI."""

__version__ = "0.1.0"
