"""Bit-exact tensor container.

A file is one JSON header line followed by the raw payload::

    {"byte_order":"little","dims":[2,3],"dtype":"float32","layout":"row-major"}\\n
    <4 * prod(dims) bytes, little-endian float32, row-major>

The header is written with sorted keys and no spaces, so identical tensors
always serialise to identical bytes.
"""
from __future__ import annotations

import json
import os

import numpy as np

HEADER = {"byte_order": "little", "dtype": "float32", "layout": "row-major"}
_DTYPE = np.dtype("<f4")
MAX_HEADER = 1 << 16


class TensorFileError(Exception):
    code = "tensor_error"


class MalformedHeaderError(TensorFileError):
    code = "malformed_header"


class TruncatedPayloadError(TensorFileError):
    code = "truncated_payload"


class DimensionMismatchError(TensorFileError):
    code = "dimension_mismatch"


class MissingTensorError(TensorFileError):
    code = "missing_tensor"


def encode(x) -> bytes:
    arr = np.asarray(x, dtype=_DTYPE, order="C")
    header = dict(HEADER, dims=[int(d) for d in arr.shape])
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n" + arr.tobytes()


def decode(data: bytes, expect_dims=None) -> np.ndarray:
    nl = data.find(b"\n", 0, MAX_HEADER)
    if nl < 0:
        raise MalformedHeaderError("no header line found")
    try:
        header = json.loads(data[:nl].decode())
        dims = [int(d) for d in header["dims"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"unreadable header: {exc}") from None
    for k, v in HEADER.items():
        if header.get(k) != v:
            raise MalformedHeaderError(f"unsupported {k}={header.get(k)!r}")
    if any(d < 0 for d in dims):
        raise MalformedHeaderError(f"negative dimension in {dims}")
    if expect_dims is not None and tuple(dims) != tuple(expect_dims):
        raise DimensionMismatchError(f"expected dims {tuple(expect_dims)}, header has {tuple(dims)}")
    payload = data[nl + 1:]
    need = _DTYPE.itemsize * int(np.prod(dims, dtype=np.int64))
    if len(payload) < need:
        raise TruncatedPayloadError(f"truncated payload: {len(payload)} of {need} bytes")
    if len(payload) > need:
        raise DimensionMismatchError(f"payload has {len(payload) - need} bytes beyond dims {dims}")
    return np.frombuffer(payload, dtype=_DTYPE).reshape(tuple(dims)).copy()


def write_tensor(path, x) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(x))


def read_tensor(path, expect_dims=None) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingTensorError(f"missing tensor file: {path}")
    with open(path, "rb") as fh:
        return decode(fh.read(), expect_dims)


def save_tensors(directory, tensors: dict, extra: dict | None = None, manifest="manifest.json"):
    """Write ``{name: array}`` as one file per tensor plus a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    entries = {}
    for name, arr in tensors.items():
        fname = f"{name}.tensor"
        write_tensor(os.path.join(directory, fname), arr)
        entries[name] = {"file": fname, "dims": list(np.shape(arr))}
    body = {"tensors": entries}
    if extra:
        body.update(extra)
    with open(os.path.join(directory, manifest), "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)


def load_tensors(directory, manifest="manifest.json"):
    """Inverse of :func:`save_tensors`; returns ``(tensors, manifest_dict)``."""
    path = os.path.join(directory, manifest)
    if not os.path.exists(path):
        raise MissingTensorError(f"missing manifest: {path}")
    with open(path) as fh:
        try:
            body = json.load(fh)
        except ValueError as exc:
            raise MalformedHeaderError(f"unreadable manifest {path}: {exc}") from None
    out = {}
    for name, ent in body.get("tensors", {}).items():
        out[name] = read_tensor(os.path.join(directory, ent["file"]), ent.get("dims"))
    return out, body
