"""Checkpoint archives: one directory per model.

Layout:
    <dir>/manifest.json   architecture metadata, tensor table, extras
                          (validation error, seed, ...)
    <dir>/<name>.bin      one blob per tensor, little-endian float32,
                          row-major

Only float32 tensors are supported; round-trips are bit-exact.
"""

import json
import os
from pathlib import Path

import numpy as np
import torch

MANIFEST_NAME = "manifest.json"


class CheckpointIncompatibleError(ValueError):
    """Archive does not match the target architecture."""


def save_checkpoint(directory, model, architecture: dict, extra: dict | None = None) -> Path:
    """Write a model's parameters and buffers as a checkpoint archive."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    for name, tensor in model.state_dict().items():
        if tensor.dtype != torch.float32:
            raise ValueError(
                f"checkpoint format is float32-only; tensor {name!r} has dtype {tensor.dtype}"
            )
        blob = tensor.detach().cpu().contiguous().numpy().astype("<f4", copy=False)
        filename = f"{name}.bin"
        blob.tofile(directory / filename)
        tensors.append({"name": name, "shape": list(tensor.shape), "dtype": "float32", "file": filename})
    manifest = {"architecture": architecture, "tensors": tensors}
    if extra:
        manifest.update(extra)
    tmp = directory / (MANIFEST_NAME + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, directory / MANIFEST_NAME)
    return directory


def read_manifest(directory) -> dict:
    with open(Path(directory) / MANIFEST_NAME, encoding="utf-8") as fh:
        return json.load(fh)


def load_state(directory):
    """Read an archive; returns (manifest, name -> float32 tensor dict)."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    state = {}
    for entry in manifest["tensors"]:
        blob = np.fromfile(directory / entry["file"], dtype="<f4")
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if blob.size != expected:
            raise CheckpointIncompatibleError(
                f"tensor {entry['name']!r}: blob holds {blob.size} values, "
                f"manifest shape {entry['shape']} needs {expected}"
            )
        state[entry["name"]] = torch.from_numpy(blob.reshape(entry["shape"]).copy())
    return manifest, state


def load_into(model, directory) -> dict:
    """Load an archive into a model, validating tensor names and shapes.

    Raises CheckpointIncompatibleError naming the first offending tensor.
    Returns the archive manifest.
    """
    manifest, state = load_state(directory)
    model_sd = model.state_dict()
    for name, tensor in model_sd.items():
        if name not in state:
            raise CheckpointIncompatibleError(f"checkpoint {directory} is missing tensor {name!r}")
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise CheckpointIncompatibleError(
                f"tensor {name!r}: checkpoint shape {tuple(state[name].shape)} "
                f"!= model shape {tuple(tensor.shape)}"
            )
    for name in state:
        if name not in model_sd:
            raise CheckpointIncompatibleError(
                f"checkpoint {directory} has unexpected tensor {name!r}"
            )
    model.load_state_dict(state)
    return manifest
