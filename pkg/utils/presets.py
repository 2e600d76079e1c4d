import json
import os
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError
from rapidfuzz import process
from simple_term_menu import TerminalMenu

from sbt.errors import ConfigError
from sbt.model import ModelConfig
from sbt.pipeline import TrainConfig
from sbt.threshold import DetectSettings

from utils.get_env import PRESET_DIR


class Preset(BaseModel):
    """Dataset preset: architecture, training schedule and detection defaults"""
    model_config = ConfigDict(extra="forbid")

    name: str
    description: str = ""
    model: ModelConfig
    train: TrainConfig = Field(default_factory=TrainConfig)
    detect: Optional[DetectSettings] = None


def list_presets(preset_dir: Optional[str] = None) -> list[str]:
    """Preset names (file stems) shipped in the preset directory."""
    directory = Path(preset_dir or PRESET_DIR)
    if not directory.is_dir():
        return []
    return sorted(p.stem for p in directory.glob("*.json"))


def _read_preset(path: Path) -> Preset:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    # a bare model config is accepted as a preset with default training
    if "model" not in data:
        data = {"name": data.get("name", path.stem), "model": data}
    try:
        return Preset.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid preset {path}: {e}") from e


def load_preset(name_or_path: str, preset_dir: Optional[str] = None) -> Preset:
    """
    Resolve a preset by file path or by name.

    :param name_or_path: ``smd``, ``japanese_vowels`` … or a path to a JSON file
    :type name_or_path: str
    :param preset_dir: overrides PRESET_DIR from env
    :type preset_dir: str | None
    :return: validated preset
    :rtype: Preset
    """
    path = Path(name_or_path)
    if path.suffix == ".json" or path.exists():
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return _read_preset(path)

    directory = Path(preset_dir or PRESET_DIR)
    key = name_or_path.lower().replace("-", "_").replace(" ", "_")
    candidate = directory / f"{key}.json"
    if candidate.is_file():
        return _read_preset(candidate)

    names = list_presets(str(directory))
    hint = ""
    if names and (match := process.extractOne(key, names)) is not None:
        hint = f"; did you mean {match[0]!r}?"
    raise ConfigError(f"unknown preset {name_or_path!r}{hint}")


def load_all_presets(preset_dir: Optional[str] = None) -> list[Preset]:
    """프리셋 디렉토리의 모든 프리셋 로드"""
    return [load_preset(name, preset_dir) for name in list_presets(preset_dir)]


def pick_preset(preset_dir: Optional[str] = None) -> Preset:
    """Interactive preset picker for terminals."""
    names = list_presets(preset_dir)
    if not names:
        raise ConfigError(f"no presets in {preset_dir or PRESET_DIR}")

    terminal_menu = TerminalMenu(names, title="Select a preset")
    selected_index = terminal_menu.show()

    if selected_index is None:
        raise ConfigError("no preset selected")

    # TerminalMenu returns a tuple in multi-select mode
    if isinstance(selected_index, tuple):
        selected_index = selected_index[0]

    return load_preset(names[selected_index], preset_dir)


def is_interactive() -> bool:
    return os.isatty(0) and os.isatty(1)
