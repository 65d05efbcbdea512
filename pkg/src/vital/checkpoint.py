"""Binary checkpoint format.

Layout: ``b"VITL"``, uint32 LE version, uint64 LE manifest length, UTF-8 JSON
manifest, then every weight as float32 LE in manifest order.  A file may hold
several models (one per building); the manifest lists them in payload order.
"""
from __future__ import annotations

import json
import math
import struct

import numpy as np

from vital.errors import (
    BadMagicError,
    CheckpointFormatError,
    ManifestMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from vital.io_utils import atomic_open
from vital.vit import VitConfig, VitModel, param_count, weight_shapes

MAGIC = b"VITL"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def _model_entry(config: VitConfig, weights: dict, meta: dict | None) -> dict:
    expected = weight_shapes(config)
    if [n for n, _ in expected] != list(weights):
        missing = {n for n, _ in expected} ^ set(weights)
        raise ManifestMismatchError(f"weights do not match config layout: {sorted(missing)}")
    entries = []
    for name, shape in expected:
        arr = weights[name]
        if tuple(arr.shape) != tuple(shape):
            raise ManifestMismatchError(f"{name}: shape {arr.shape}, config expects {shape}")
        entries.append({"name": name, "shape": list(shape)})
    declared = sum(math.prod(e["shape"]) for e in entries)
    if declared != param_count(config):
        raise ManifestMismatchError(f"manifest declares {declared} values, param_count is {param_count(config)}")
    return {"config": config.to_dict(), "weights": entries, "param_count": declared, "meta": meta or {}}


def save_models(models: list[VitModel], path) -> None:
    manifest = {"models": [_model_entry(m.config, m.weights, m.meta()) for m in models]}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with atomic_open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for m in models:
            for name, _ in weight_shapes(m.config):
                fh.write(np.ascontiguousarray(m.weights[name], dtype="<f4").tobytes())


def save_checkpoint(weights: dict, config: VitConfig, path, meta: dict | None = None) -> None:
    save_models([VitModel.from_meta(config, weights, meta or {})], path)


def read_manifest(raw: bytes) -> tuple[dict, int]:
    if len(raw) < _HEADER.size:
        if not raw.startswith(MAGIC[: len(raw)]):
            raise BadMagicError("not a VITL checkpoint")
        raise TruncatedPayloadError("file ends inside the header")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader understands {VERSION}")
    start = _HEADER.size
    if len(raw) < start + mlen:
        raise TruncatedPayloadError("file ends inside the manifest")
    try:
        manifest = json.loads(raw[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable manifest: {exc}") from None
    return manifest, start + mlen


def load_models(path) -> list[VitModel]:
    with open(path, "rb") as fh:
        raw = fh.read()
    manifest, offset = read_manifest(raw)
    models_meta = manifest.get("models")
    if not isinstance(models_meta, list) or not models_meta:
        raise CheckpointFormatError("manifest lists no models")
    declared = sum(math.prod(w["shape"]) for m in models_meta for w in m["weights"])
    available = len(raw) - offset
    if available < 4 * declared:
        raise TruncatedPayloadError(f"payload holds {available} bytes, manifest declares {4 * declared}")
    if available > 4 * declared:
        raise ManifestMismatchError(f"payload holds {available} bytes, manifest declares {4 * declared}")

    models = []
    for entry in models_meta:
        config = VitConfig.from_dict(entry["config"])
        expected = weight_shapes(config)
        listed = [(w["name"], tuple(w["shape"])) for w in entry["weights"]]
        if listed != expected:
            raise ManifestMismatchError("weight list disagrees with the stored config")
        weights = {}
        for name, shape in listed:
            n = math.prod(shape)
            weights[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32)
            offset += 4 * n
        models.append(VitModel.from_meta(config, weights, entry.get("meta", {})))
    return models


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], VitConfig]:
    """Weights and config of the first model in ``path``."""
    model = load_models(path)[0]
    return model.weights, model.config
