"""Binary container shared by scene, feature-cache, hand-model and checkpoint files.

Layout (all little-endian)::

    offset 0   4 bytes   magic  b"AHOI"
    offset 4   u32       container version (currently 1)
    offset 8   u64       header length H in bytes
    offset 16  H bytes   UTF-8 JSON header
    ...        padding   zero bytes up to an 8-byte boundary
    ...        arrays    raw C-order data, each starting on an 8-byte boundary

The JSON header carries ``kind`` (e.g. ``"scene"``, ``"features"``), a
``schema_version`` for that kind, free-form metadata, and an ``arrays`` list
of ``{"name", "dtype", "shape", "offset", "nbytes"}`` entries.  Offsets are
relative to the start of the data section.  Allowed dtypes are ``<f4``,
``<f8``, ``<i4``, ``<i8`` and ``|u1``.
"""
import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"AHOI"
CONTAINER_VERSION = 1
_DTYPES = {"<f4", "<f8", "<i4", "<i8", "|u1"}


class FormatError(ValueError):
    """Raised for malformed or mismatched container files."""


def _align(n):
    return (n + 7) & ~7


def atomic_write_bytes(path, data):
    """Write ``data`` to ``path`` via a temp file in the same directory and rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pack(kind, arrays, meta=None, schema_version=1):
    """Serialize named arrays plus JSON metadata to bytes."""
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        code = np.dtype(dt).str
        if code not in _DTYPES:
            raise FormatError(f"array {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=code).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw + b"\0" * (_align(len(raw)) - len(raw)))
        offset += _align(len(raw))
    header = {"kind": kind, "schema_version": schema_version,
              "meta": meta or {}, "arrays": entries}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    head = MAGIC + struct.pack("<IQ", CONTAINER_VERSION, len(hbytes)) + hbytes
    head += b"\0" * (_align(len(head)) - len(head))
    return head + b"".join(blobs)


def unpack(data, kind=None, schema_version=None):
    """Inverse of :func:`pack`; returns ``(meta, arrays)``."""
    if len(data) < 16 or data[:4] != MAGIC:
        raise FormatError("not an artihoi container (bad magic)")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"expected a {kind!r} file, found {header.get('kind')!r}")
    if schema_version is not None and header.get("schema_version") != schema_version:
        raise FormatError(f"{kind} schema version {header.get('schema_version')} "
                          f"does not match expected {schema_version}")
    base = _align(16 + hlen)
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        buf = data[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise FormatError(f"array {e['name']!r} truncated")
        arrays[e["name"]] = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).copy()
    meta = dict(header.get("meta", {}))
    meta["_kind"] = header.get("kind")
    meta["_schema_version"] = header.get("schema_version")
    return meta, arrays


def save(path, kind, arrays, meta=None, schema_version=1):
    atomic_write_bytes(path, pack(kind, arrays, meta, schema_version))


def load(path, kind=None, schema_version=None):
    with open(path, "rb") as f:
        return unpack(f.read(), kind, schema_version)
