"""HTTP search service over a frozen snapshot."""

from .app import ServiceConfig, create_app, serve

__all__ = ["ServiceConfig", "create_app", "serve"]
