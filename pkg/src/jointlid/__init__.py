"""Joint supervised and masked pseudo-label training for spoken language identification."""

__version__ = "0.1.0"
