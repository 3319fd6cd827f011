"""Feature-level attribute manipulation for retrieval features."""

__version__ = "0.1.0"
