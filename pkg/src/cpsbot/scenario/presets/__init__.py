"""Bundled scenario presets (TOML)."""

from __future__ import annotations

from importlib import resources
from typing import List

from ..config import ScenarioConfig


def preset_names() -> List[str]:
    return sorted(p.name[:-5] for p in resources.files(__name__).iterdir() if p.name.endswith(".toml"))


def preset_path(name: str):
    path = resources.files(__name__) / f"{name}.toml"
    if not path.is_file():
        raise FileNotFoundError(f"no preset named {name!r}; available: {', '.join(preset_names())}")
    return path


def load_preset(name: str) -> ScenarioConfig:
    with resources.as_file(preset_path(name)) as path:
        return ScenarioConfig.load(path)
