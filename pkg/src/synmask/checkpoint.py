"""Checkpoint container: named parameter blobs plus the config as embedded text.

Format (documented for consumers): a torch-serialized dict with keys
``format_version`` (int, currently 1), ``config`` (effective config as
key=value text), ``model`` (state dict of named tensors), ``optimizer``
(optimizer state dict or None), ``step`` (int) and ``torch_rng`` (RNG state).
"""

from __future__ import annotations

import torch

from .config import RunConfig, config_from_text, config_to_text
from .model import SyntaxTransformer

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: SyntaxTransformer, run_config: RunConfig,
                    optimizer=None, step: int = 0):
    payload = {
        "format_version": FORMAT_VERSION,
        "config": config_to_text(run_config),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "torch_rng": torch.get_rng_state(),
    }
    torch.save(payload, path)


def load_payload(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    return payload


def load_checkpoint(path):
    """Returns (model, run_config, payload). The model is in eval mode."""
    payload = load_payload(path)
    run_config = config_from_text(payload["config"])
    model = SyntaxTransformer(run_config.model)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, run_config, payload


def average_checkpoints(paths) -> SyntaxTransformer:
    """Parameter-wise arithmetic mean of checkpoints sharing one config."""
    if not paths:
        raise CheckpointError("no checkpoints to average")
    payloads = [load_payload(p) for p in paths]
    config_text = payloads[0]["config"]
    for p, payload in zip(paths, payloads):
        if payload["config"] != config_text:
            raise CheckpointError(f"config mismatch in {p}")
    states = [p["model"] for p in payloads]
    averaged = {}
    for key, first in states[0].items():
        if first.is_floating_point():
            stacked = torch.stack([s[key].to(torch.float64) for s in states])
            averaged[key] = stacked.mean(dim=0).to(first.dtype)
        else:
            averaged[key] = first.clone()
    run_config = config_from_text(config_text)
    model = SyntaxTransformer(run_config.model)
    model.load_state_dict(averaged)
    model.eval()
    return model
