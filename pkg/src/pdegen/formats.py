"""Binary field and checkpoint files, plus the CSV logs.

All binary data is little-endian. A field file is

    magic "PDGFIELD" | uint32 version | uint32 N | float64 c
    | float64 x0, x1, t0, t1 | N*N float64 values, t-major

A checkpoint is

    magic "PDGCKPT\\0" | uint32 version | uint32 header length | JSON header
    | raw arrays in the order listed by the header
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FIELD_MAGIC = b"PDGFIELD"
FIELD_VERSION = 1
_FIELD_HEAD = struct.Struct("<8sIId4d")

CKPT_MAGIC = b"PDGCKPT\0"
CKPT_VERSION = 1

TRAINLOG_HEADER = "wall_time_sec,epoch,minibatch,loss,kind"
TRAINLOG_FORMAT = "# pdegen-trainlog v1"
TIMING_HEADER = "p,epoch,compute_sec,comm_sec,wall_sec,loss"
TIMING_FORMAT = "# pdegen-timing v1"


class FormatError(ValueError):
    pass


@dataclass
class FieldFile:
    values: np.ndarray          # [N, N], axis 0 = t
    c: float
    x_extent: tuple = (0.0, 1.0)
    t_extent: tuple = (0.0, 0.2)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def write_field(path, field: FieldFile) -> None:
    vals = np.asarray(field.values, dtype="<f8")
    if vals.ndim != 2 or vals.shape[0] != vals.shape[1]:
        raise FormatError(f"field must be square, got shape {vals.shape}")
    head = _FIELD_HEAD.pack(FIELD_MAGIC, FIELD_VERSION, vals.shape[0], float(field.c),
                            *map(float, field.x_extent), *map(float, field.t_extent))
    Path(path).write_bytes(head + vals.tobytes())


def read_field(path) -> FieldFile:
    raw = Path(path).read_bytes()
    if len(raw) < _FIELD_HEAD.size or raw[:8] != FIELD_MAGIC:
        raise FormatError(f"{path}: not a field file")
    magic, version, n, c, x0, x1, t0, t1 = _FIELD_HEAD.unpack_from(raw)
    if version != FIELD_VERSION:
        raise FormatError(f"{path}: unsupported field version {version}")
    body = raw[_FIELD_HEAD.size:]
    if len(body) != 8 * n * n:
        raise FormatError(f"{path}: expected {n * n} values, file holds {len(body) // 8}")
    vals = np.frombuffer(body, dtype="<f8").reshape(n, n).astype(np.float64)
    return FieldFile(vals, c, (x0, x1), (t0, t1))


def write_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """``header`` must be JSON-serializable; arrays are stored raw in insertion order."""
    index, blobs = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        index.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(le).tobytes())
    head = json.dumps({**header, "arrays": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)) + head)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    off = 16 + hlen
    arrays = {}
    for entry in header.pop("arrays"):
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = off + count * dt.itemsize
        if end > len(raw):
            raise FormatError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw[off:end], dtype=dt).reshape(entry["shape"]).astype(dt.newbyteorder("="))
        off = end
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return header, arrays


def read_csv_rows(path) -> tuple[list[str], list[dict]]:
    """Rows of one of our CSV logs; comment lines are skipped."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    if not lines:
        raise FormatError(f"{path}: empty CSV")
    cols = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        vals = ln.split(",")
        if len(vals) != len(cols):
            raise FormatError(f"{path}: row {ln!r} has {len(vals)} fields, expected {len(cols)}")
        rows.append(dict(zip(cols, vals)))
    return cols, rows
