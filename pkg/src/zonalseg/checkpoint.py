"""Checkpoint manifest + float32 blob.

``<stem>.json`` holds the model config, metadata and one entry per stored
array ({name, group, shape, offset} with offset in bytes); ``<stem>.bin`` is
the concatenation of all arrays as little-endian float32.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .zonal_net import ModelConfig, SegmentationModel, build_model

FORMAT = "zonalseg-checkpoint"
VERSION = 1
_LE_F32 = np.dtype("<f4")


def _paths(path) -> tuple:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def save_checkpoint(path, model: SegmentationModel, momentum: dict | None = None,
                    metadata: dict | None = None) -> Path:
    """Write parameters, BN running statistics and optimizer buffers."""
    manifest_path, blob_path = _paths(path)
    groups = [
        ("param", [(n, p.data) for n, p in model.named_parameters()]),
        ("buffer", list(model.named_buffers())),
        ("momentum", sorted((momentum or {}).items())),
    ]
    entries, chunks, offset = [], [], 0
    for group, items in groups:
        for name, arr in items:
            raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
            entries.append({"name": name, "group": group, "shape": list(np.shape(arr)),
                            "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "blob": blob_path.name,
        "blob_bytes": offset,
        "model_config": model.config.to_dict(),
        "tensors": entries,
        "metadata": metadata or {},
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path


def read_manifest(path) -> dict:
    manifest_path, _ = _paths(path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{manifest_path} is not a {FORMAT} manifest")
    return manifest


def load_checkpoint(path) -> tuple:
    """Rebuild (model, momentum buffers, metadata) from a checkpoint."""
    manifest_path, _ = _paths(path)
    manifest = read_manifest(manifest_path)
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise ValueError(f"checkpoint blob is {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    config = ModelConfig.from_dict(manifest["model_config"])
    model = build_model(config)
    params = dict(model.named_parameters())
    buffers = {}
    for m_name, module in _named_modules(model):
        for b_name in module._buffers:
            buffers[f"{m_name}{b_name}"] = (module, b_name)
    momentum = {}
    seen_params = set()
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = math.prod(shape)
        arr = np.frombuffer(blob, dtype=_LE_F32, count=count, offset=entry["offset"])
        arr = arr.astype(np.float32).reshape(shape)
        name, group = entry["name"], entry["group"]
        if group == "param":
            if name not in params or params[name].shape != shape:
                raise ValueError(f"checkpoint parameter {name} {shape} does not fit the model")
            params[name].data = arr
            seen_params.add(name)
        elif group == "buffer":
            module, b_name = buffers[name]
            module._buffers[b_name] = arr
        elif group == "momentum":
            momentum[name] = arr
    missing = set(params) - seen_params
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    model.init_running_stats()
    return model, momentum, manifest.get("metadata", {})


def _named_modules(module, prefix=""):
    yield prefix, module
    for name, child in module.children():
        yield from _named_modules(child, f"{prefix}{name}.")
