"""Checkpoint container: JSON header + little-endian float32 payload.

Layout: 8-byte magic, uint64 little-endian header length, UTF-8 JSON header
{format_version, config, params: name -> {shape, offset}}, then the raw
parameter payload. Offsets are byte positions into the payload. Everything
is written in sorted parameter order with a canonical JSON encoding, so
save -> load -> save reproduces the file bit for bit.
"""

from __future__ import annotations

import json

import numpy as np

from ..errors import ConfigError

MAGIC = b"EHRSEQCK"
CHECKPOINT_FORMAT_VERSION = 1


def _payload_array(value) -> np.ndarray:
    data = value.data if hasattr(value, "data") else value
    return np.ascontiguousarray(np.asarray(data), dtype="<f4")


def save_checkpoint(path: str, config: dict, params: dict) -> None:
    arrays = {name: _payload_array(p) for name, p in params.items()}
    manifest = {}
    offset = 0
    for name in sorted(arrays):
        manifest[name] = {"shape": list(arrays[name].shape), "offset": offset}
        offset += arrays[name].nbytes
    header = json.dumps(
        {"format_version": CHECKPOINT_FORMAT_VERSION, "config": config, "params": manifest},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint64(len(header)).tobytes())
        fh.write(header)
        for name in sorted(arrays):
            fh.write(arrays[name].tobytes())


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
    header_len = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"{path}: unsupported checkpoint format_version {header.get('format_version')}")
    payload = blob[16 + header_len:]
    params = {}
    for name, entry in header["params"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        params[name] = arr.reshape(shape).copy()
    return header["config"], params


def assign_parameters(params: dict, loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into an existing parameter dict, validating names/shapes."""
    missing = sorted(set(params) ^ set(loaded))
    if missing:
        raise ConfigError(f"checkpoint parameter names do not match model: {missing}")
    for name, p in params.items():
        if tuple(p.data.shape) != tuple(loaded[name].shape):
            raise ConfigError(
                f"checkpoint shape {loaded[name].shape} != model shape "
                f"{p.data.shape} for {name}")
        p.data[...] = loaded[name].astype(p.data.dtype)
