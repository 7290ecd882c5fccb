"""Checkpoints: trainable tensors in a safetensors archive, config and backbone fingerprint as metadata."""

from __future__ import annotations

import json
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from trajllm.config import TrainConfig
from trajllm.model import TrajLLM, base_parameter_names, build_model
from trajllm.nn.backbone import FrozenGPT2

FORMAT = "trajllm-checkpoint-1"


class CheckpointError(ValueError):
    pass


def backbone_fingerprint(model: TrajLLM) -> str:
    return "none" if model.backbone is None else model.backbone.base.fingerprint()


def checkpoint_tensors(model: TrajLLM) -> dict[str, torch.Tensor]:
    """Every state tensor except the frozen base backbone weights."""
    skip = base_parameter_names(model)
    return {k: v.detach().clone().contiguous() for k, v in model.state_dict().items() if k not in skip}


def save_checkpoint(model: TrajLLM, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT,
        "config": model.config.to_json(),
        "fingerprint": backbone_fingerprint(model),
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    save_file(checkpoint_tensors(model), str(path), metadata=meta)
    return path


def read_metadata(path) -> dict:
    try:
        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata() or {}
    except Exception as exc:  # safetensors raises its own error types
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    return meta


def load_checkpoint(path, base: FrozenGPT2 | None = None) -> TrajLLM:
    """Rebuild the model from the embedded config, verify the backbone, restore tensors."""
    meta = read_metadata(path)
    config = TrainConfig.from_dict(json.loads(meta["config"]))
    model = build_model(config, base)
    found = backbone_fingerprint(model)
    if found != meta["fingerprint"]:
        raise CheckpointError(
            f"backbone fingerprint mismatch: checkpoint {meta['fingerprint']}, loaded {found}"
        )
    tensors = {}
    with safe_open(str(path), framework="pt") as fh:
        for k in fh.keys():
            tensors[k] = fh.get_tensor(k)
    missing, unexpected = model.load_state_dict(tensors, strict=False)
    missing = set(missing) - base_parameter_names(model)
    if missing or unexpected:
        raise CheckpointError(f"tensor mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
    model.eval()
    return model
