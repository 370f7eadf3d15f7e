"""Binary tensor container, CSV/JSON table writers.

Container layout (little-endian throughout):
  magic "MTLW" | version u32 | tensor count u32 | per tensor:
  name length u32, UTF-8 name, rank u32, dims u32..., raw float data.
Version 1 stores float32 payloads (the interchange format for backbone
weights); version 2 stores float64 so checkpoints round-trip bit-exactly
at the engine's test precision.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MTLW"
_WIDTH = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class ContainerError(ValueError):
    """Malformed or unsupported tensor container."""


def save_tensors(path, tensors: Mapping[str, np.ndarray], version: int = 2) -> None:
    if version not in _WIDTH:
        raise ContainerError(f"unsupported container version {version}")
    dtype = _WIDTH[version]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", version, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype(dtype).tobytes(order="C"))


def load_tensors(path) -> tuple[dict[str, np.ndarray], int]:
    """Read a container; returns (name -> array in the stored width, version)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version not in _WIDTH:
        raise ContainerError(f"{path}: unsupported version {version}")
    dtype = _WIDTH[version]
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=off).reshape(dims)
        off += n * dtype.itemsize
        out[name] = arr.copy()
    if off != len(blob):
        raise ContainerError(f"{path}: {len(blob) - off} trailing bytes")
    return out, version


def format_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header: list[str], rows: list[list]) -> None:
    """UTF-8 CSV, LF endings, '.' decimal, floats at full round-trip precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_cell(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def write_json(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8", newline="\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
