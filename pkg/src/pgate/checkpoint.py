"""Checkpoint directory format: a JSON manifest plus one raw binary file
per parameter.

manifest.json records the model spec (enough to rebuild the architecture),
the parameter inventory (name, file, shape), training metrics, and a free
"extra" dict. Parameter files are little-endian float32 in C order, named
after the parameter path, so a checkpoint is inspectable with nothing but
a hex editor and the manifest.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .metrics import EpochMetrics
from .model import Model, ModelSpec, build_model

FORMAT_NAME = "pg-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """The directory is not a readable checkpoint of this format."""


def save_checkpoint(directory, model: Model, metrics: list[EpochMetrics] | None = None,
                    extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = []
    for path, p in model.parameters():
        fname = f"{path}.bin"
        (directory / fname).write_bytes(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
        params.append({"name": path, "file": fname, "shape": list(p.value.shape), "dtype": "<f4"})
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "model": json.loads(model.spec.to_json()),
        "params": params,
        "metrics": [dataclasses.asdict(m) for m in (metrics or [])],
        "extra": extra or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[Model, list[EpochMetrics], dict]:
    """Rebuild the model and restore every parameter bit for bit."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"{directory}: no manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{manifest_path}: invalid JSON ({e})") from None
    if manifest.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{directory}: format {manifest.get('format')!r} is not {FORMAT_NAME!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{directory}: unsupported version {manifest.get('version')!r}")

    spec = ModelSpec.from_json(json.dumps(manifest["model"]))
    # any generator works here, every parameter is overwritten below
    model = build_model(spec, np.random.default_rng(0))
    state = {}
    for entry in manifest["params"]:
        fpath = directory / entry["file"]
        if not fpath.is_file():
            raise CheckpointError(f"{directory}: missing parameter file {entry['file']}")
        shape = tuple(entry["shape"])
        raw = np.frombuffer(fpath.read_bytes(), dtype="<f4")
        expected = int(np.prod(shape)) if shape else 1
        if raw.size != expected:
            raise CheckpointError(f"{entry['file']}: {raw.size} values do not fill shape {shape}")
        state[entry["name"]] = raw.reshape(shape).astype(np.float32)
    try:
        model.load_state_dict(state)
    except ValueError as e:
        raise CheckpointError(f"{directory}: {e}") from None

    metrics = [EpochMetrics(**m) for m in manifest.get("metrics", [])]
    return model, metrics, manifest.get("extra", {})
