"""
Run configuration: presets, YAML files and dotted --set overrides resolved into one RunConfig
"""

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Union

import yaml
from pydantic import ValidationError

from unimse.errors import ConfigError
from unimse.models import ModelConfig, RunConfig

EFFECTIVE_CONFIG = "effective_config.yaml"

PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {
        "model": {"d_model": 32, "n_encoder_layers": 2, "n_decoder_layers": 2, "n_heads": 2,
                  "n_fusion": 2, "n_cl": 2},
        "batch_size": 8,
    },
    "paper": {
        "model": {
            "d_model": 768, "n_encoder_layers": 12, "n_decoder_layers": 12, "n_heads": 12, "d_ff": 3072,
            "d_acoustic_in": 74, "d_acoustic": 64, "d_visual_in": 35, "d_visual": 64,
            "n_fusion": 3, "n_cl": 3, "d_common": 64, "common_length": 32,
            "max_source_length": 512, "init_std": 0.02,
        },
        "synth": {"d_acoustic": 74, "d_visual": 35},
        "optim": {"lr_backbone": 3e-4, "lr_main": 1e-4, "lr_pmf": 1e-4},
        "batch_size": 96,
        "alpha": 0.5,
        "beta": 0.5,
    },
}

PRESET_ALIASES = {"full": "paper"}


@dataclass(frozen=True)
class Seeds:
    init: int
    shuffle: int
    synth: int
    dropout: int


def derive_seeds(seed: int) -> Seeds:
    return Seeds(init=seed + 1, shuffle=seed + 2, synth=seed + 3, dropout=seed + 4)


def _merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = copy.deepcopy(value)
    return base


def parse_override(item: str) -> Dict[str, Any]:
    """'model.d_model=16' -> {'model': {'d_model': 16}}; the value is read as a YAML scalar"""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"Override '{item}' is not of the form key=value")
    value = yaml.safe_load(raw) if raw.strip() else None
    nested: Dict[str, Any] = {}
    cursor = nested
    parts = key.strip().split(".")
    for part in parts[:-1]:
        cursor = cursor.setdefault(part, {})
    cursor[parts[-1]] = value
    return nested


def load_yaml(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"Config file {path.name} must hold a mapping")
    return loaded


def resolve_config(preset: Optional[str] = None, config_path: Optional[Union[str, Path]] = None,
                   overrides: Iterable[str] = (), **flags) -> RunConfig:
    """
    preset -> YAML file -> --set overrides -> dedicated flags

    Flags left at None are ignored.
    """
    values: Dict[str, Any] = {}
    file_values = load_yaml(config_path) if config_path else {}
    name = preset or file_values.get("preset") or "desk"
    name = PRESET_ALIASES.get(name, name)
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset '{name}'", {"presets": sorted(PRESETS)})
    _merge(values, PRESETS[name])
    _merge(values, file_values)
    for item in overrides:
        _merge(values, parse_override(item))
    _merge(values, {k: v for k, v in flags.items() if v is not None})
    values["preset"] = name
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        problems = {".".join(str(p) for p in err["loc"]) or "config": err["msg"] for err in e.errors()}
        raise ConfigError("Invalid configuration: " + "; ".join(f"{k}: {v}" for k, v in problems.items()),
                          problems)


def effective_model_config(config: RunConfig, vocab_size: int) -> ModelConfig:
    """Model shape after the ablation switches are applied"""
    n_fusion = config.effective_n_fusion
    n_cl = config.effective_n_cl if config.cl_enabled and config.drop_modality != "av" else 0
    return config.model.model_copy(update={
        "vocab_size": vocab_size,
        "n_fusion": n_fusion,
        "n_cl": n_cl,
        "decoder_pmf": config.model.decoder_pmf and n_fusion > 0,
    })


def write_effective_config(config: RunConfig, output_dir: Union[str, Path]) -> Path:
    path = Path(output_dir) / EFFECTIVE_CONFIG
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False), encoding="utf-8")
    return path
