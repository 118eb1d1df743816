"""Checkpoint archives.

A checkpoint is a zip file holding ``meta.json`` (structured text: format
version, model config, stage tag, arbitrary numeric state) plus one binary
entry per named tensor under ``tensors/``. The tensor format is::

    b"TNSR" | uint32 ndim | uint64 dims... | float64 data

all little-endian, so round trips are bitwise. Key names follow the
parameter dictionaries: ``tok_emb``, ``layers.{i}.wq`` ..., ``sampler.{i}.w1``
..., ``gates.hidden`` ..., ``masks.hidden`` ... (see the README for the full
inventory).
"""

from __future__ import annotations

import json
import struct
import zipfile

import numpy as np

from .autodiff import Tensor

FORMAT_VERSION = 1
_MAGIC = b"TNSR"


class CheckpointError(Exception):
    """Unreadable, truncated or incompatible checkpoint file."""


def _encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
    header = _MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def _decode_tensor(blob: bytes, name: str) -> np.ndarray:
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"tensor {name!r} has a bad magic header")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{ndim}Q", blob, 8)
    offset = 8 + 8 * ndim
    expected = int(np.prod(shape, dtype=np.int64)) * 8 if ndim else 8
    payload = blob[offset:]
    if len(payload) != expected:
        raise CheckpointError(
            f"tensor {name!r} is truncated: expected {expected} bytes, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def save_checkpoint(path, meta: dict, tensors: dict) -> None:
    """Write the archive. ``meta`` must be JSON-serializable; ``tensors``
    maps names to arrays or Tensors."""
    meta = dict(meta)
    meta["format_version"] = FORMAT_VERSION
    meta["tensor_names"] = sorted(tensors)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=1, sort_keys=True))
        for name in sorted(tensors):
            t = tensors[name]
            arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
            zf.writestr(f"tensors/{name}", _encode_tensor(arr))


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read (meta, tensors). Any structural problem raises CheckpointError
    and leaves no partial state behind."""
    try:
        with zipfile.ZipFile(path) as zf:
            try:
                meta = json.loads(zf.read("meta.json"))
            except KeyError:
                raise CheckpointError(f"{path}: missing meta.json") from None
            except json.JSONDecodeError as e:
                raise CheckpointError(f"{path}: corrupt meta.json ({e.msg})") from None
            version = meta.get("format_version")
            if version != FORMAT_VERSION:
                raise CheckpointError(
                    f"{path}: format version {version!r} unsupported (expected {FORMAT_VERSION})"
                )
            names = meta.get("tensor_names", [])
            tensors = {}
            for name in names:
                try:
                    blob = zf.read(f"tensors/{name}")
                except KeyError:
                    raise CheckpointError(f"{path}: tensor {name!r} listed but missing") from None
                tensors[name] = _decode_tensor(blob, name)
    except zipfile.BadZipFile:
        raise CheckpointError(f"{path}: not a checkpoint archive (bad zip)") from None
    return meta, tensors
