"""
Transformational States Configuration
Preset loading, JSON file merging and dotted overrides

A run configuration is built in three layers: a named preset from
tstates/configs/, an optional user JSON file, then `section.key=value`
overrides. Every layer is checked against the known sections and keys.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from tstates.data import GeneratorConfig
from tstates.errors import ConfigError
from tstates.model import CoreMode, ModelConfig, ResidualMode
from tstates.training import OptimizerConfig, TrainingConfig


PRESET_DIR = Path(__file__).parent / "configs"
PRESETS = ("desk", "mnist-paper", "kth-paper", "ucf-paper", "miniature")

ABLATIONS = {
    "none": {},
    "no-core": {"core_mode": CoreMode.CONVLSTM_ONLY.value},
    "skip-last-input": {"residual_mode": ResidualMode.SKIP_FROM_LAST_INPUT.value},
    "no-residual": {"residual_mode": ResidualMode.NONE.value},
}


def load_preset(name: str) -> Dict[str, Any]:
    """Raw preset document"""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}, expected one of {', '.join(PRESETS)}")
    path = PRESET_DIR / f"{name}.json"
    return json.loads(path.read_text())


def deep_merge(base: Dict[str, Any], overlay: Dict[str, Any], path: str = "") -> Dict[str, Any]:
    """Merge overlay into a copy of base; overlay keys must already exist in base"""
    merged = dict(base)
    for key, value in overlay.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            merged[key] = deep_merge(base[key], value, where)
        else:
            merged[key] = value
    return merged


def parse_override(text: str) -> Tuple[List[str], Any]:
    """'section.key=value' -> (['section', 'key'], value); value is JSON when it parses"""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {text!r} names no key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts, value


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    result = document
    for text in overrides:
        parts, value = parse_override(text)
        nested: Any = value
        for part in reversed(parts):
            nested = {part: nested}
        result = deep_merge(result, nested)
    return result


def _template() -> Dict[str, Any]:
    """Every accepted key, at dataclass defaults"""
    return {
        "preset": "",
        "description": "",
        "model": ModelConfig().to_dict(),
        "data": GeneratorConfig().to_dict(),
        "optimizer": OptimizerConfig().to_dict(),
        "training": TrainingConfig().to_dict(),
    }


@dataclass
class ExperimentConfig:
    preset: str
    model: ModelConfig
    data: GeneratorConfig
    optimizer: OptimizerConfig
    training: TrainingConfig
    description: str = ""

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.data.validate()
        self.optimizer.validate()
        self.training.validate()
        if self.data.frames < self.model.input_frames + self.model.predict_frames:
            raise ConfigError(
                f"data makes {self.data.frames} frames, model needs T+K = "
                f"{self.model.input_frames + self.model.predict_frames}"
            )
        if self.data.canvas_size != self.model.input_size:
            raise ConfigError(
                f"canvas {self.data.canvas_size}px does not match model input {self.model.input_size}px"
            )
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "preset": self.preset,
            "description": self.description,
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "training": self.training.to_dict(),
        }

    def to_json(self) -> str:
        """Canonical text embedded in checkpoints"""
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "ExperimentConfig":
        merged = deep_merge(_template(), document)
        model = dict(merged["model"])
        model["name"] = merged["preset"] or model.get("name", "custom")
        return cls(
            preset=merged["preset"],
            description=merged["description"],
            model=ModelConfig.from_dict(model),
            data=GeneratorConfig.from_dict(merged["data"]),
            optimizer=OptimizerConfig.from_dict(merged["optimizer"]),
            training=TrainingConfig.from_dict(merged["training"]),
        ).validate()


def resolve_document(preset: str = "desk", config_path: Optional[Path] = None,
                     overrides: Sequence[str] = (), ablation: str = "none",
                     seed: Optional[int] = None) -> Dict[str, Any]:
    """
    Merge the configuration layers into one document without validating it.

    Args:
        preset: Named preset
        config_path: JSON file merged over the preset
        overrides: `section.key=value` strings applied last
        ablation: Ablation variant applied to the model section
        seed: Seed for the model initialization and the data generator
    """
    document = deep_merge(_template(), load_preset(preset))
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"configuration file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must hold a JSON object")
        document = deep_merge(document, loaded)

    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}, expected one of {', '.join(ABLATIONS)}")
    document = deep_merge(document, {"model": ABLATIONS[ablation]})
    if seed is not None:
        document = deep_merge(document, {"model": {"seed": seed}, "data": {"seed": seed}})
    return apply_overrides(document, overrides)


def resolve_config(preset: str = "desk", config_path: Optional[Path] = None,
                   overrides: Sequence[str] = (), ablation: str = "none",
                   seed: Optional[int] = None) -> ExperimentConfig:
    """Effective, validated configuration"""
    return ExperimentConfig.from_dict(resolve_document(preset, config_path, overrides, ablation, seed))


def from_checkpoint_text(text: str) -> ExperimentConfig:
    """Recover the configuration embedded in a checkpoint"""
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"checkpoint configuration is not valid JSON: {e}")
    config = document.get("config")
    if not isinstance(config, dict):
        raise ConfigError("checkpoint carries no configuration")
    return ExperimentConfig.from_dict(config)
