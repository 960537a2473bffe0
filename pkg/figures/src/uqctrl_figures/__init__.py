"""Batch figure renderer for uqctrl CSV outputs.

Reads only the documented CSV schemas, so it needs nothing from the
producing package and either side can change internals freely.
"""

from .render import KINDS, FigureSpec, SchemaError, render

__all__ = ["KINDS", "FigureSpec", "SchemaError", "render"]

__version__ = "0.1.0"
