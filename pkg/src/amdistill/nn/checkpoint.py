"""Checkpoint directories: ``manifest.json`` plus one AMDT file per tensor."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from ..tensor import io as tio
from .models import Model, ModelSpec, build_model

MANIFEST = "manifest.json"
FORMAT = "amdistill-checkpoint/1"


class CheckpointError(IOError):
    pass


def save_checkpoint(model: Model, path, epoch: int = 0, history: Optional[list] = None,
                    extra: Optional[dict] = None) -> Path:
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in model.state_dict().items():
        fname = f"tensors/{name}.amdt"
        tio.save(np.asarray(arr), path / fname)
        files[name] = fname
    manifest = {
        "format": FORMAT,
        "spec": model.spec.to_dict(),
        "dtype": str(model.dtype),
        "epoch": epoch,
        "history": history or [],
        "tensors": files,
    }
    if extra:
        manifest.update(extra)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return path


def read_manifest(path) -> dict:
    mf = Path(path) / MANIFEST
    if not mf.is_file():
        raise CheckpointError(f"no checkpoint at {path} (missing {MANIFEST})")
    manifest = json.loads(mf.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{mf}: unsupported format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path) -> Tuple[Model, dict]:
    path = Path(path)
    manifest = read_manifest(path)
    model = build_model(ModelSpec.from_dict(manifest["spec"]), dtype=np.dtype(manifest["dtype"]))
    state = {name: tio.load(path / f).data for name, f in manifest["tensors"].items()}
    model.load_state_dict(state)
    return model, manifest
