"""Binary checkpoints: a JSON manifest followed by a raw float64 payload.

Layout: 8-byte magic, little-endian uint64 manifest length, UTF-8 JSON
manifest, then every parameter's float64 little-endian buffer at the offset
the manifest records. The manifest carries a sha256 of the payload, the
config snapshot, and the step count.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .config import ModelConfig
from .errors import ConfigurationError, IntegrityError
from .model import Model, build_model

MAGIC = b"HMOECKPT"


def save_checkpoint(model: Model, path: str, step: int = 0) -> None:
    names = sorted(model.params)
    entries = []
    payload = bytearray()
    for name in names:
        p = model.params[name]
        buf = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append(
            {"name": name, "shape": list(p.shape), "offset": len(payload), "count": p.size}
        )
        payload += buf
    manifest = {
        "format": 1,
        "step": step,
        "config": model.cfg.to_dict(),
        "params": entries,
        "sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(bytes(payload))


def read_manifest(path: str) -> dict:
    with open(path, "rb") as f:
        head = f.read(len(MAGIC) + 8)
        if len(head) < len(MAGIC) + 8 or head[: len(MAGIC)] != MAGIC:
            raise IntegrityError(f"{path}: not a checkpoint file")
        (blob_len,) = struct.unpack("<Q", head[len(MAGIC):])
        blob = f.read(blob_len)
        if len(blob) != blob_len:
            raise IntegrityError(f"{path}: truncated manifest")
        try:
            return json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise IntegrityError(f"{path}: corrupt manifest: {e}") from e


def load_checkpoint(path: str, expect_config: ModelConfig | None = None) -> tuple[Model, int]:
    """Rebuild the model; parameters are bit-exact copies of the saved ones."""
    manifest = read_manifest(path)
    with open(path, "rb") as f:
        blob_len = struct.unpack("<Q", f.read(len(MAGIC) + 8)[len(MAGIC):])[0]
        f.seek(len(MAGIC) + 8 + blob_len)
        payload = f.read()
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise IntegrityError(f"{path}: payload checksum mismatch (truncated or corrupt)")

    cfg = ModelConfig.from_dict(manifest["config"])
    if expect_config is not None:
        saved = cfg.to_dict()
        given = expect_config.to_dict()
        for key in saved:
            if saved[key] != given[key]:
                raise ConfigurationError(
                    f"checkpoint config mismatch on {key!r}: saved {saved[key]}, requested {given[key]}"
                )
    model = build_model(cfg)
    for entry in manifest["params"]:
        name = entry["name"]
        if name not in model.params:
            raise IntegrityError(f"{path}: manifest names unknown parameter {name!r}")
        raw = payload[entry["offset"] : entry["offset"] + entry["count"] * 8]
        if len(raw) != entry["count"] * 8:
            raise IntegrityError(f"{path}: payload truncated at parameter {name!r}")
        model.params[name].data = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
    return model, manifest["step"]
