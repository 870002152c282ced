"""Low-level container I/O: one JSON header line followed by a raw payload.

Layout::

    <UTF-8 JSON object, no embedded newlines>\\n
    <little-endian array data, C order, dtype given by header["dtype"]>

The header always carries ``format_version`` and ``kind``.  Higher-level
readers (grid series, climatologies, skill maps, models) build on
:func:`write_container` and :func:`read_container`.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ContainerError, DimensionMismatchError, MalformedHeaderError

FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<c16": np.dtype("<c16")}


def encode_header(header):
    return json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def write_container(path, header, arrays, dtype="<f4"):
    """Write ``header`` plus the concatenation of ``arrays`` cast to ``dtype``."""
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["dtype"] = dtype
    dt = _DTYPES[dtype]
    chunks = [np.ascontiguousarray(a, dtype=dt).tobytes(order="C") for a in arrays]
    try:
        with open(path, "wb") as fh:
            fh.write(encode_header(header))
            fh.write(b"\n")
            for c in chunks:
                fh.write(c)
    except OSError as exc:
        raise ContainerError(f"cannot write {os.fspath(path)!r}: {exc}") from exc


def read_container(path, kind=None):
    """Return ``(header, payload)`` where payload is a flat array of ``header['dtype']``."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ContainerError(f"cannot read {os.fspath(path)!r}: {exc}") from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise MalformedHeaderError("no header terminator found")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError("header must be a JSON object")
    if header.get("format_version") != FORMAT_VERSION:
        raise MalformedHeaderError(f"unsupported format_version {header.get('format_version')!r}")
    if kind is not None and header.get("kind") != kind:
        raise MalformedHeaderError(f"expected kind {kind!r}, found {header.get('kind')!r}")
    dt = _DTYPES.get(header.get("dtype"))
    if dt is None:
        raise MalformedHeaderError(f"unknown dtype {header.get('dtype')!r}")
    body = raw[nl + 1:]
    if len(body) % dt.itemsize:
        raise DimensionMismatchError("payload length is not a whole number of elements")
    payload = np.frombuffer(body, dtype=dt)
    return header, payload


def take(payload, offset, shape):
    """Slice ``shape`` elements from ``payload`` starting at ``offset``."""
    n = int(np.prod(shape, dtype=np.int64))
    if offset + n > payload.size:
        raise DimensionMismatchError(
            f"payload holds {payload.size} elements, header requires at least {offset + n}"
        )
    return payload[offset:offset + n].reshape(shape), offset + n


def expect_consumed(payload, offset):
    if offset != payload.size:
        raise DimensionMismatchError(
            f"payload holds {payload.size} elements, header describes {offset}"
        )


def mask_to_rle(mask):
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return {"start": True, "runs": []}
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change, [flat.size]))
    return {"start": bool(flat[0]), "runs": np.diff(edges).astype(int).tolist()}


def rle_to_mask(rle, shape):
    try:
        value = bool(rle["start"])
        runs = [int(r) for r in rle["runs"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"bad mask encoding: {exc}") from exc
    if any(r <= 0 for r in runs):
        raise MalformedHeaderError("mask run lengths must be positive")
    if sum(runs) != int(np.prod(shape)):
        raise DimensionMismatchError(
            f"mask runs cover {sum(runs)} cells, grid has {int(np.prod(shape))}"
        )
    out = np.empty(sum(runs), dtype=bool)
    pos = 0
    for r in runs:
        out[pos:pos + r] = value
        pos += r
        value = not value
    return out.reshape(shape)
