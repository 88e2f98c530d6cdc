"""
Versioned checkpoints: config, vocabulary and named float64 tensors in one joblib file
"""

from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import joblib
import numpy as np

from unimse.errors import CheckpointError
from unimse.models import ModelConfig, RunConfig
from unimse.textcodec import Vocabulary

CHECKPOINT_FORMAT = "unimse-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Union[str, Path], config: RunConfig, vocab: Vocabulary,
                    tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.model_dump(mode="json"),
        "vocab": vocab.tokens,
        "tensors": {name: np.array(value, dtype=np.float64) for name, value in sorted(tensors.items())},
    }
    joblib.dump(payload, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[RunConfig, Vocabulary, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = joblib.load(path)
    except Exception as e:
        raise CheckpointError(f"Unreadable checkpoint {path.name}: {e}")
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path.name} is not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {payload.get('version')}")
    return RunConfig.model_validate(payload["config"]), Vocabulary(payload["vocab"]), payload["tensors"]


def _flatten(values: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in values.items():
        if isinstance(value, Mapping):
            flat.update(_flatten(value, f"{prefix}{key}."))
        else:
            flat[f"{prefix}{key}"] = value
    return flat


def check_compatible(expected: ModelConfig, stored: ModelConfig) -> None:
    """Raise listing every model setting that differs"""
    a, b = _flatten(expected.model_dump(mode="json")), _flatten(stored.model_dump(mode="json"))
    mismatched = {k: (a.get(k), b.get(k)) for k in sorted(set(a) | set(b)) if a.get(k) != b.get(k)}
    if mismatched:
        raise CheckpointError(f"Checkpoint incompatible on {', '.join(mismatched)}", mismatched)
