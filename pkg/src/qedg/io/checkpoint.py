"""Checkpoints: a JSON manifest beside a blob of little-endian float32.

``<prefix>.json`` lists every tensor as (name, shape, byte offset, byte
length) in parameter order; ``<prefix>.bin`` is those tensors concatenated
with no padding.
"""
from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..nets import Network, NetworkSpec
from ..tensor import ParamSet

FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


def _paths(prefix) -> tuple[Path, Path]:
    p = Path(prefix)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def save_checkpoint(prefix, network: Network, metrics: dict | None = None) -> Path:
    manifest_path, blob_path = _paths(prefix)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    table, chunks, offset = [], [], 0
    for name, t in network.params:
        buf = np.ascontiguousarray(t.data, dtype=_LE_F32).tobytes()
        table.append({"name": name, "shape": list(t.shape), "offset": offset, "length": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "role": network.spec.role,
        "spec": network.spec.to_dict(),
        "seed": network.params.rng_seed,
        "tensors": table,
        "blob": blob_path.name,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "metrics": metrics or {},
    }
    blob_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def read_manifest(prefix) -> dict:
    manifest_path, _ = _paths(prefix)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"{manifest_path}: invalid JSON ({exc})") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{manifest_path}: format_version {version!r}, this build reads {FORMAT_VERSION}")
    return manifest


def _expected_shapes(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    sizes = spec.layer_sizes
    out = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        out += [(f"W{i}", (a, b)), (f"b{i}", (b,))]
    return out


def load_checkpoint(prefix) -> Network:
    manifest_path, _ = _paths(prefix)
    manifest = read_manifest(prefix)
    blob_path = manifest_path.with_name(manifest["blob"])
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"missing checkpoint blob {blob_path}") from None
    arrays = OrderedDict()
    expected_offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * _LE_F32.itemsize
        if entry["offset"] != expected_offset:
            raise CorruptCheckpoint(
                f"tensor '{entry['name']}' starts at byte {entry['offset']}, expected {expected_offset} (gap or overlap)"
            )
        if entry["length"] != nbytes:
            raise CorruptCheckpoint(f"tensor '{entry['name']}' length {entry['length']} does not match shape {shape}")
        if entry["name"] in arrays:
            raise CorruptCheckpoint(f"duplicate tensor '{entry['name']}'")
        chunk = blob[entry["offset"] : entry["offset"] + nbytes]
        if len(chunk) != nbytes:
            raise CorruptCheckpoint(f"blob ends inside tensor '{entry['name']}'")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=_LE_F32).reshape(shape).astype(np.float32)
        expected_offset += nbytes
    if expected_offset != len(blob):
        raise CorruptCheckpoint(f"blob is {len(blob)} bytes, manifest accounts for {expected_offset}")
    try:
        spec = NetworkSpec.from_dict(manifest["spec"])
    except (TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{manifest_path}: invalid network spec ({exc})") from None
    expected = _expected_shapes(spec)
    found = [(name, arr.shape) for name, arr in arrays.items()]
    if found != expected:
        raise CorruptCheckpoint(f"tensor table {found} does not match the network layout {expected}")
    params = ParamSet(arrays.items(), rng_seed=manifest.get("seed", 0))
    return Network(spec, params)


def model_id(prefix) -> str:
    manifest = read_manifest(prefix)
    return f"{manifest['role']}-{manifest['blob_sha256'][:12]}"
