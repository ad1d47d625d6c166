"""Chunked binary container (``EVAM``) for models and network weights.

Layout, all integers little-endian::

    b"EVAM"            magic
    u16                format version
    u32                chunk count
    chunk*             repeated

    chunk:
      u16 name length, utf-8 name
      u8  dtype code   (0 = utf-8 bytes, 1 = f64, 2 = f32)
      u8  ndim
      u32 dim * ndim
      payload          row-major, little-endian

The first chunk is always ``__meta__``: a utf-8 JSON document describing
what the arrays are. A JSON text form with the same content exists for
debugging (:func:`to_json` / :func:`from_json`).
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"EVAM"
VERSION = 1
META_CHUNK = "__meta__"

_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_CODES = {"f64": 1, "f32": 2}


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None, dtype: str = "f64") -> bytes:
    """Serialize named arrays plus a JSON-able metadata dict."""
    if dtype not in _CODES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    code = _CODES[dtype]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(arrays) + 1))

    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    _write_chunk(buf, META_CHUNK, 0, (len(meta_bytes),), meta_bytes)
    for name in sorted(arrays):
        arr = np.array(arrays[name], dtype=_DTYPES[code], order="C")    # keeps 0-d shapes
        _write_chunk(buf, name, code, arr.shape, arr.tobytes())
    return buf.getvalue()


def _write_chunk(buf, name, code, shape, payload):
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<BB", code, len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))
    buf.write(payload)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of :func:`dumps`. Arrays come back as float64."""
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise DataError("not an EVAM file (bad magic)")
    try:
        version, count = struct.unpack_from("<HI", view, 4)
        if version != VERSION:
            raise DataError(f"unsupported EVAM version {version}")
        pos = 10
        arrays: dict[str, np.ndarray] = {}
        meta: dict = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", view, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            if code == 0:
                size = shape[0]
                meta = json.loads(bytes(view[pos:pos + size]).decode("utf-8"))
                pos += size
                continue
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + size > len(view):
                raise DataError(f"truncated chunk {name!r}")
            arr = np.frombuffer(view[pos:pos + size], dtype=dt).reshape(shape)
            arrays[name] = arr.astype(np.float64)
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt EVAM payload: {exc}") from exc
    return arrays, meta


def save(path, arrays, meta=None, dtype="f64") -> int:
    """Write a container to ``path``; returns the number of bytes written."""
    data = dumps(arrays, meta, dtype)
    Path(path).write_bytes(data)
    return len(data)


def load(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"model file not found: {path}")
    return loads(path.read_bytes())


def to_json(arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    doc = {
        "magic": MAGIC.decode(),
        "version": VERSION,
        "meta": meta or {},
        "chunks": {
            name: {"shape": list(np.shape(a)), "data": np.asarray(a, dtype=float).ravel().tolist()}
            for name, a in sorted(arrays.items())
        },
    }
    return json.dumps(doc, indent=1)


def from_json(text: str) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(text)
    if doc.get("magic") != MAGIC.decode():
        raise DataError("not an EVAM JSON document")
    arrays = {
        name: np.asarray(c["data"], dtype=np.float64).reshape(c["shape"])
        for name, c in doc["chunks"].items()
    }
    return arrays, doc.get("meta", {})
