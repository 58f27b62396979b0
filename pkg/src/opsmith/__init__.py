"""opsmith: synthesis of linear tensor operators from coordinate primitives."""

__version__ = "0.1.0"
