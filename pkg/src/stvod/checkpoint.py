"""Checkpoints: a JSON manifest (parameter names, shapes, offsets, step,
config hash) next to a single ``params.bin`` holding each parameter's raw
little-endian float64 blob at its recorded offset. Save/load round-trips
are bitwise exact."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Parameter


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(
    directory: Path,
    params: list[Parameter],
    kind: str,
    step: int,
    config_hash: str,
    config_flat: dict | None = None,
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for p in params:
        blob = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        entries.append(
            {
                "name": p.name,
                "shape": list(p.value.shape),
                "offset": offset,
                "length": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": 1,
        "kind": kind,
        "step": step,
        "config_hash": config_hash,
        "params": entries,
    }
    if config_flat is not None:
        manifest["config"] = {k: list(v) if isinstance(v, tuple) else v
                              for k, v in config_flat.items()}
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(directory / "params.bin", "wb") as fh:
        for blob in blobs:
            fh.write(blob)


def read_manifest(directory: Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise CheckpointError(f"{directory}: no manifest.json")
    with open(path) as fh:
        return json.load(fh)


def load_checkpoint(
    directory: Path,
    params: list[Parameter],
    expect_hash: str | None = None,
) -> dict:
    """Load blobs into the given parameters (matched by name).

    Refuses on a config-hash mismatch or on any missing/mismatched
    parameter, since silently loading into a differently-shaped model would
    corrupt it.
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    if expect_hash is not None and manifest["config_hash"] != expect_hash:
        raise CheckpointError(
            f"{directory}: checkpoint was written for model-config hash "
            f"{manifest['config_hash']}, but this run's model config hashes to "
            f"{expect_hash}; refusing to load incompatible parameters"
        )
    raw = (directory / "params.bin").read_bytes()
    by_name = {e["name"]: e for e in manifest["params"]}
    for p in params:
        entry = by_name.get(p.name)
        if entry is None:
            raise CheckpointError(f"{directory}: parameter {p.name} missing from checkpoint")
        if tuple(entry["shape"]) != p.value.shape:
            raise CheckpointError(
                f"{directory}: parameter {p.name} has shape {entry['shape']} "
                f"on disk but {list(p.value.shape)} in the model"
            )
        blob = raw[entry["offset"] : entry["offset"] + entry["length"]]
        p.node.value = np.frombuffer(blob, dtype="<f8").reshape(p.value.shape).copy()
    return manifest
