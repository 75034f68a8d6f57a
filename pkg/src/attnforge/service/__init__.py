"""HTTP service wrapping the command layer."""

from .app import app, create_app

__all__ = ["app", "create_app"]
