"""HTTP adapter serving the funcground chat/segmentation wire contracts
over pluggable model checkpoints (or deterministic stubs for testing)."""

from .config import AdapterConfig, load_config
from .service import build_app, serve

__version__ = "0.1.0"

__all__ = ["AdapterConfig", "build_app", "load_config", "serve"]
