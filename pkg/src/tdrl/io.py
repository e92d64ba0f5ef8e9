"""Bit-exact persistence: array payloads, dataset and run manifests, checkpoints.

Array payload layout (all little-endian)::

    b"TDRL" | u32 format_version | u32 rank | u32 dim * rank | u8 dtype tag | raw row-major data
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import ObservedDataset
from .errors import ArtifactIOError, ConfigError
from .mixing import MixingFunction
from .model import ModelConfig
from .sim import GeneratorSpec

MAGIC = b"TDRL"
FORMAT_VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_TAGS = {np.dtype("float64"): 0, np.dtype("int64"): 1, np.dtype("bool"): 2, np.dtype("uint8"): 2}
DATASET_MANIFEST = "manifest.json"


def checksum(data: bytes) -> str:
    """64-bit BLAKE2b digest as 16 hex characters."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def encode_array(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if a.dtype not in _TAGS:
        raise ConfigError(f"unsupported array dtype {a.dtype}; use float64, int64 or bool")
    tag = _TAGS[a.dtype]
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + struct.pack("<B", tag)
    return header + np.ascontiguousarray(a, dtype=DTYPES[tag]).tobytes()


def decode_array(buf: bytes, name: str = "<buffer>") -> np.ndarray:
    try:
        if buf[:4] != MAGIC:
            raise ArtifactIOError(f"{name}: bad magic bytes {buf[:4]!r}")
        version, rank = struct.unpack_from("<II", buf, 4)
        if version != FORMAT_VERSION:
            raise ArtifactIOError(f"{name}: unsupported format version {version}")
        shape = struct.unpack_from(f"<{rank}I", buf, 12)
        offset = 12 + 4 * rank
        (tag,) = struct.unpack_from("<B", buf, offset)
        if tag not in DTYPES:
            raise ArtifactIOError(f"{name}: unknown dtype tag {tag}")
        dtype = DTYPES[tag]
        count = int(np.prod(shape, dtype=np.int64))
        body = buf[offset + 1 :]
        if len(body) != count * dtype.itemsize:
            raise ArtifactIOError(f"{name}: payload has {len(body)} bytes, expected {count * dtype.itemsize}")
    except struct.error as exc:
        raise ArtifactIOError(f"{name}: truncated header ({exc})") from exc
    a = np.frombuffer(body, dtype=dtype).reshape(shape).copy()
    return a.astype(bool) if tag == 2 else a.astype(dtype.newbyteorder("="))


def header_size(rank: int) -> int:
    return 13 + 4 * rank


def _write_bytes(path: Path, data: bytes):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def _read_bytes(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc


def write_array(path, a: np.ndarray) -> dict:
    """Write one payload; returns its index entry."""
    a = np.asarray(a)
    data = encode_array(a)
    _write_bytes(Path(path), data)
    return {"file": Path(path).name, "shape": list(a.shape), "dtype": str(a.dtype),
            "offset": header_size(a.ndim), "checksum": checksum(data)}


def read_array(path, expected_checksum: Optional[str] = None) -> np.ndarray:
    data = _read_bytes(Path(path))
    if expected_checksum is not None and checksum(data) != expected_checksum:
        raise ArtifactIOError(f"{path}: checksum mismatch")
    return decode_array(data, str(path))


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def write_json(path, obj):
    _write_bytes(Path(path), dump_json(obj))


def read_json(path) -> dict:
    try:
        return json.loads(_read_bytes(Path(path)))
    except json.JSONDecodeError as exc:
        raise ArtifactIOError(f"{path}: invalid JSON ({exc})") from exc


# datasets ------------------------------------------------------------------

def save_dataset(directory, ds: ObservedDataset) -> dict:
    directory = Path(directory)
    arrays = {"x": ds.x, "domain": ds.domain}
    if ds.z is not None:
        arrays["z"] = ds.z
    if ds.adjacency is not None:
        arrays["adjacency"] = np.asarray(ds.adjacency, bool)
    index = []
    for name, a in arrays.items():
        entry = write_array(directory / f"{name}.tdrl", a)
        index.append({"name": name, **entry})
    manifest = {
        "format_version": FORMAT_VERSION,
        "generator_spec": ds.spec.to_dict() if ds.spec is not None else None,
        "mixing": ds.mixing.to_dict() if ds.mixing is not None else None,
        "array_index": index,
    }
    write_json(directory / DATASET_MANIFEST, manifest)
    return manifest


def load_dataset(directory) -> ObservedDataset:
    directory = Path(directory)
    manifest = read_json(directory / DATASET_MANIFEST)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ArtifactIOError(f"{directory}: unsupported dataset format {manifest.get('format_version')}")
    arrays = {}
    for entry in manifest["array_index"]:
        a = read_array(directory / entry["file"], entry["checksum"])
        if list(a.shape) != entry["shape"]:
            raise ArtifactIOError(f"{entry['file']}: shape {a.shape} differs from manifest {entry['shape']}")
        arrays[entry["name"]] = a
    if "x" not in arrays or "domain" not in arrays:
        raise ArtifactIOError(f"{directory}: dataset lacks x or domain payloads")
    spec = GeneratorSpec.from_dict(manifest["generator_spec"]) if manifest.get("generator_spec") else None
    mixing = MixingFunction.from_dict(manifest["mixing"]) if manifest.get("mixing") else None
    return ObservedDataset(arrays["x"], arrays["domain"], arrays.get("z"), arrays.get("adjacency"), spec, mixing)


# checkpoints and histories -------------------------------------------------

def save_checkpoint(path, ckpt) -> str:
    payload = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config is not None else None,
        "best_epoch": ckpt.best_epoch,
        "state": ckpt.state,
    }
    buf = _io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    _write_bytes(Path(path), data)
    return checksum(data)


def load_checkpoint(path):
    from .trainer import Checkpoint, TrainConfig

    data = _read_bytes(Path(path))
    try:
        payload = torch.load(_io.BytesIO(data), weights_only=True)
    except Exception as exc:  # torch raises several unrelated types for corrupt files
        raise ArtifactIOError(f"{path}: unreadable checkpoint ({exc})") from exc
    tc = payload.get("train_config")
    return Checkpoint(ModelConfig.from_dict(payload["model_config"]), payload["state"], payload["best_epoch"],
                      TrainConfig.from_dict(tc) if tc else None)


def write_history_csv(path, history):
    rows = history.rows()
    buf = _io.StringIO()
    fields = list(rows[0]) if rows else ["epoch"]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in r.items()})
    _write_bytes(Path(path), buf.getvalue().encode())


def write_matrix_csv(path, a: np.ndarray, header=None):
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header is not None:
        writer.writerow(header)
    for row in np.atleast_2d(a):
        writer.writerow([f"{v:.17g}" for v in row])
    _write_bytes(Path(path), buf.getvalue().encode())


def write_kv(path, items: dict):
    """Key-value text document, one ``key: value`` per line in insertion order."""
    lines = []
    for k, v in items.items():
        if isinstance(v, float):
            v = f"{v:.17g}"
        elif isinstance(v, (list, tuple, dict)):
            v = json.dumps(v, sort_keys=True)
        lines.append(f"{k}: {v}")
    _write_bytes(Path(path), ("\n".join(lines) + "\n").encode())


def read_kv(path) -> dict:
    out = {}
    for line in _read_bytes(Path(path)).decode().splitlines():
        if ":" in line:
            k, v = line.split(":", 1)
            out[k.strip()] = v.strip()
    return out


# run manifests ---------------------------------------------------------------

def file_checksum(path) -> str:
    return checksum(_read_bytes(Path(path)))


def inputs_hash(paths) -> str:
    """Content hash over input files (directories are walked in sorted order)."""
    h = hashlib.blake2b(digest_size=8)
    for p in sorted(Path(p) for p in paths):
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            h.update(f.name.encode())
            h.update(_read_bytes(f))
    return h.hexdigest()


def write_run_manifest(directory, *, argv, config: dict, seeds: dict, inputs, deterministic: bool,
                       started: Optional[str] = None, finished: Optional[str] = None) -> dict:
    """List every file in ``directory`` with its checksum, plus the run context."""
    directory = Path(directory)
    artifacts = {}
    for f in sorted(q for q in directory.rglob("*") if q.is_file() and q.name != "run.json"):
        artifacts[str(f.relative_to(directory))] = file_checksum(f)
    manifest = {
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "deterministic": deterministic,
        "inputs_hash": inputs_hash(inputs) if inputs else None,
        "artifacts": artifacts,
    }
    if not deterministic:
        manifest["started"] = started
        manifest["finished"] = finished
    write_json(directory / "run.json", manifest)
    return manifest


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ArtifactIOError(f"cannot create {path}: {exc}") from exc
    return path
