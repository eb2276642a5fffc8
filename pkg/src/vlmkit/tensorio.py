"""Single-file f32 tensor container.

Layout::

    u64 little-endian header length N
    N bytes of UTF-8 JSON: {name: {"dtype": "f32", "shape": [...], "offset": o, "nbytes": n}}
    data region: little-endian float32, row-major, tensors packed in name order

Offsets are relative to the start of the data region. Writing is canonical:
the same tensors always produce the same bytes.
"""
from __future__ import annotations

import json
import math
import os
import struct
from typing import Mapping

import numpy as np

from .corpus import atomic_write

DTYPES = {"f32": np.dtype("<f4")}


class ContainerError(ValueError):
    pass


class TruncatedFileError(ContainerError):
    pass


class MalformedHeaderError(ContainerError):
    pass


class UnknownDtypeError(ContainerError):
    pass


class OverlappingRegionsError(ContainerError):
    pass


class LengthMismatchError(ContainerError):
    pass


def encode_container(tensors: Mapping[str, np.ndarray]) -> bytes:
    header = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} contains non-finite values")
        data = np.ascontiguousarray(arr, dtype=DTYPES["f32"]).tobytes()
        header[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset, "nbytes": len(data)}
        chunks.append(data)
        offset += len(data)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def decode_container(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 8:
        raise TruncatedFileError(f"file is {len(buf)} bytes, shorter than the 8-byte length prefix")
    (hlen,) = struct.unpack_from("<Q", buf, 0)
    if 8 + hlen > len(buf):
        raise TruncatedFileError(f"header declares {hlen} bytes but only {len(buf) - 8} follow the prefix")
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError("header must be a JSON object")
    data = memoryview(buf)[8 + hlen:]

    regions = []
    for name, info in header.items():
        if not isinstance(info, dict) or not {"dtype", "shape", "offset", "nbytes"} <= info.keys():
            raise MalformedHeaderError(f"tensor {name!r}: entry needs dtype, shape, offset, nbytes")
        if info["dtype"] not in DTYPES:
            raise UnknownDtypeError(f"tensor {name!r}: unknown dtype {info['dtype']!r}")
        shape, offset, nbytes = info["shape"], info["offset"], info["nbytes"]
        if (not isinstance(shape, list) or not all(type(d) is int and d >= 0 for d in shape)
                or type(offset) is not int or type(nbytes) is not int or offset < 0):
            raise MalformedHeaderError(f"tensor {name!r}: bad shape/offset/nbytes {shape!r} {offset!r} {nbytes!r}")
        expected = DTYPES[info["dtype"]].itemsize * math.prod(shape)
        if nbytes != expected:
            raise MalformedHeaderError(f"tensor {name!r}: nbytes {nbytes} != {expected} for shape {shape}")
        regions.append((offset, offset + nbytes, name))

    regions.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(regions, regions[1:]):
        if s1 < e0:
            raise OverlappingRegionsError(f"tensors {n0!r} [{s0},{e0}) and {n1!r} [{s1},{e1}) overlap")
    end = max((e for _, e, _ in regions), default=0)
    if end != len(data):
        raise LengthMismatchError(f"header describes {end} data bytes but the file holds {len(data)}")

    out = {}
    for start, stop, name in regions:
        info = header[name]
        arr = np.frombuffer(data[start:stop], dtype=DTYPES[info["dtype"]]).reshape(info["shape"])
        out[name] = arr.astype(np.float32)
    return {name: out[name] for name in sorted(out)}


def write_container(tensors: Mapping[str, np.ndarray], path: str | os.PathLike) -> None:
    payload = encode_container(tensors)
    atomic_write(path, lambda fh: fh.write(payload), mode="wb")


def read_container(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return decode_container(buf)
    except ContainerError as exc:
        raise type(exc)(f"{path}: {exc}") from None
