"""HTTP service: FastAPI app factory and request/response schemas."""

from .app import app, create_app

__all__ = ["app", "create_app"]
