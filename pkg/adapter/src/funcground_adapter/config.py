"""Adapter configuration: YAML file plus FUNCGROUND_ADAPTER_* environment."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import yaml

ENV_PREFIX = "FUNCGROUND_ADAPTER_"


@dataclass(frozen=True)
class AdapterConfig:
    """Which checkpoints to serve and how.

    Model identifiers are checkpoint names understood by the loaders in
    :mod:`funcground_adapter.models`; ``"stub"`` selects the deterministic
    built-in test models and ``None`` disables the role. At least one role
    must be enabled.
    """

    chat_model: Optional[str] = "stub"
    segment_model: Optional[str] = "stub"
    device: str = "cpu"
    port: int = 8601
    max_image_edge: int = 1024
    max_backlog: int = 8

    def __post_init__(self):
        if self.chat_model is None and self.segment_model is None:
            raise ValueError("at least one of chat_model / segment_model must be set")
        if self.max_image_edge < 16:
            raise ValueError("max_image_edge must be >= 16")
        if self.max_backlog < 1:
            raise ValueError("max_backlog must be >= 1")


def _none_if_disabled(value):
    if value is None or str(value).lower() in ("none", "off", ""):
        return None
    return str(value)


def load_config(path: Optional[str] = None, environ=os.environ) -> AdapterConfig:
    """YAML settings overridden by environment variables."""
    settings: dict = {}
    if path:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: adapter config must be a mapping")
        settings.update(loaded)
    for key in ("chat_model", "segment_model", "device", "port", "max_image_edge", "max_backlog"):
        raw = environ.get(ENV_PREFIX + key.upper())
        if raw is not None:
            settings[key] = raw
    return AdapterConfig(
        chat_model=_none_if_disabled(settings.get("chat_model", "stub")),
        segment_model=_none_if_disabled(settings.get("segment_model", "stub")),
        device=str(settings.get("device", "cpu")),
        port=int(settings.get("port", 8601)),
        max_image_edge=int(settings.get("max_image_edge", 1024)),
        max_backlog=int(settings.get("max_backlog", 8)),
    )
