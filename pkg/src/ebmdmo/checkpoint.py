"""Binary checkpoint container shared by all learned modules.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then a
contiguous little-endian float32 payload. The header maps parameter name ->
{dtype, shape, offset} (offsets relative to the payload start) and records
the model kind plus its hyperparameters. Parameter order is sorted by name
so identical state always produces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import IoError

_HEADER_LEN_FMT = "<Q"


def save_checkpoint(
    path: str | Path,
    kind: str,
    hparams: dict,
    params: dict[str, np.ndarray],
) -> None:
    entries: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f4")  # tobytes() emits C order
        entries[name] = {
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": offset,
        }
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": kind, "hparams": hparams, "params": entries},
        sort_keys=True,
    ).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(struct.pack(_HEADER_LEN_FMT, len(header)))
            fh.write(header)
            for raw in chunks:
                fh.write(raw)
    except OSError as exc:
        raise IoError(f"checkpoint write failed: {exc}") from exc


def load_checkpoint(path: str | Path) -> tuple[str, dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise IoError(f"missing checkpoint: {path}")
    raw = path.read_bytes()
    (header_len,) = struct.unpack_from(_HEADER_LEN_FMT, raw, 0)
    header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    payload = raw[8 + header_len :]
    params: dict[str, np.ndarray] = {}
    for name, entry in header["params"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            payload, dtype="<f4", count=count, offset=entry["offset"]
        ).reshape(shape)
        params[name] = arr.copy()
    return header["kind"], header["hparams"], params


def checkpoint_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(int(np.prod(a.shape)) for a in params.values()))
