from .service import ModelRegistry, create_app

__all__ = ["ModelRegistry", "create_app"]
