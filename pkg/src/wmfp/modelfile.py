"""Binary model files.

Layout (all integers little-endian)::

    b"WMFP"  uint16 version  uint32 manifest_length  manifest (UTF-8 JSON)
    float32 tensor data, concatenated in manifest order

The manifest lists every layer (name, kind, shape, modulatable flag and the
remaining layer fields) and every tensor (name, shape).  Base and stamped
models share the layout; stamped ones carry ``fingerprint_hash``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .nets import LayerSpec, Network

MAGIC = b"WMFP"
VERSION = 1
_HEADER = struct.Struct("<4sHI")


class ModelFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def to_bytes(net: Network, fingerprint_hash=None) -> bytes:
    layers = []
    for spec in net.layers:
        entry = asdict(spec)
        entry["shape"] = list(spec.weight_shape())
        layers.append(entry)
    tensors = [{"name": k, "shape": list(v.shape)} for k, v in net.params.items()]
    manifest = {"kind": net.kind, "layers": layers, "tensors": tensors, "meta": net.meta}
    if fingerprint_hash is None:
        fingerprint_hash = net.meta.get("fingerprint_hash")
    if fingerprint_hash is not None:
        manifest["fingerprint_hash"] = fingerprint_hash
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    data = b"".join(np.ascontiguousarray(v.data, dtype="<f4").tobytes() for v in net.params.values())
    return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + data


def from_bytes(raw: bytes) -> Network:
    if len(raw) < _HEADER.size:
        raise ModelFormatError("file shorter than header", len(raw))
    magic, version, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise ModelFormatError(f"unsupported format version {version}", 4)
    start = _HEADER.size
    if len(raw) < start + n:
        raise ModelFormatError("manifest truncated", len(raw))
    try:
        manifest = json.loads(raw[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"manifest is not valid JSON: {exc}", start) from None
    layers = []
    for entry in manifest["layers"]:
        entry = {k: v for k, v in entry.items() if k != "shape"}
        layers.append(LayerSpec(**entry))
    offset = start + n
    params = {}
    for t in manifest["tensors"]:
        shape = tuple(t["shape"])
        size = int(np.prod(shape)) * 4
        if offset + size > len(raw):
            raise ModelFormatError(f"tensor {t['name']} truncated", len(raw))
        arr = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=offset).reshape(shape).astype(np.float32)
        params[t["name"]] = Tensor(arr, name=t["name"])
        offset += size
    if offset != len(raw):
        raise ModelFormatError(f"{len(raw) - offset} trailing bytes", offset)
    meta = dict(manifest.get("meta", {}))
    if "fingerprint_hash" in manifest:
        meta["fingerprint_hash"] = manifest["fingerprint_hash"]
    return Network(manifest["kind"], layers, params, meta)


def save(net: Network, path, fingerprint_hash=None) -> str:
    """Write ``net`` to ``path``; returns the file's SHA-256 hex digest."""
    raw = to_bytes(net, fingerprint_hash)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load(path) -> Network:
    return from_bytes(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_stamped(stamped, path) -> str:
    return save(stamped.network, path, stamped.fingerprint_hash)


def load_stamped(path):
    from .generator import StampedDecoder

    net = load(path)
    if "fingerprint_hash" not in net.meta:
        raise ModelFormatError("not a stamped model: manifest has no fingerprint_hash", 0)
    return StampedDecoder(net, net.meta["fingerprint_hash"])


PIPELINE_PARTS = ("encoder", "base_decoder", "decoder", "mapping", "affine", "fpdecoder")


def save_pipeline(pipe, directory) -> dict:
    """One model file per network plus ``config.txt``; returns {file name: sha256}."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for part in PIPELINE_PARTS:
        hashes[f"{part}.wmfp"] = save(getattr(pipe, part), directory / f"{part}.wmfp")
    (directory / "config.txt").write_text(pipe.config.to_text(), encoding="utf-8")
    hashes["config.txt"] = file_hash(directory / "config.txt")
    return hashes


def load_pipeline(directory):
    from .training import Pipeline, TrainConfig

    directory = Path(directory)
    config = TrainConfig.from_file(directory / "config.txt")
    nets = {part: load(directory / f"{part}.wmfp") for part in PIPELINE_PARTS}
    for net in nets.values():
        net.requires_grad_(False)
    return Pipeline(config=config, **nets)


def save_base(encoder: Network, decoder: Network, directory) -> dict:
    directory = Path(directory)
    return {"encoder.wmfp": save(encoder, directory / "encoder.wmfp"),
            "base_decoder.wmfp": save(decoder, directory / "base_decoder.wmfp")}


def load_base(directory) -> tuple:
    directory = Path(directory)
    enc, dec = load(directory / "encoder.wmfp"), load(directory / "base_decoder.wmfp")
    enc.requires_grad_(False)
    dec.requires_grad_(False)
    return enc, dec
