"""Versioned checkpoint container shared by the translator and the enhancer.

A checkpoint is a ``torch.save`` archive holding a plain dict::

    format, version, kind, fingerprint, config, modules, optimizers,
    step, provenance, parent_fingerprint, extra
"""
from __future__ import annotations

import os
from pathlib import Path

import torch

from .errors import IncompatibleCheckpoint

CHECKPOINT_FORMAT = "unagan-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, kind: str, config: dict, fingerprint: str, modules: dict, optimizers: dict | None = None,
                    step: int = 0, provenance: str | None = None, parent_fingerprint: str | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "fingerprint": fingerprint,
        "config": config,
        "modules": {name: {k: v.detach().clone() for k, v in m.state_dict().items()} for name, m in modules.items()},
        "optimizers": {name: opt.state_dict() for name, opt in (optimizers or {}).items()},
        "step": step,
        "provenance": provenance,
        "parent_fingerprint": parent_fingerprint,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, kind: str | None = None) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpoint(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if kind is not None and payload.get("kind") != kind:
        raise IncompatibleCheckpoint(f"{path}: expected a {kind!r} checkpoint, found {payload.get('kind')!r}")
    return payload
