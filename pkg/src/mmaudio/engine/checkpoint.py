"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      4 bytes  b"MMCK"
    version    u32
    meta_len   u32, followed by meta_len bytes of UTF-8 JSON
    n_arrays   u32
    per array: name_len u16, name (UTF-8), dtype code u8, ndim u8,
               dims u64 * ndim, payload (little-endian, row-major)

Array names are namespaced: ``param/...``, ``buffer/...``, ``adam_m/...``,
``adam_v/...``. The JSON metadata carries the epoch counter, Adam scalars
and any caller-supplied fields (variant, config).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..exceptions import InvalidInputError
from .optim import AdamState

MAGIC = b"MMCK"
VERSION = 1
_DTYPES = {1: "<f4", 2: "<f8", 3: "<i8"}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


def _pack_arrays(arrays):
    chunks = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise InvalidInputError(f"cannot store dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(chunks)


def save_checkpoint(path, params, buffers=None, adam=None, epoch=0, meta=None):
    arrays = {f"param/{k}": v for k, v in params.items()}
    arrays.update({f"buffer/{k}": v for k, v in (buffers or {}).items()})
    header = {"format_version": VERSION, "epoch": int(epoch), "meta": meta or {}}
    if adam is not None:
        header["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t}
        arrays.update({f"adam_m/{k}": v for k, v in adam.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in adam.v.items()})
    meta_raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(meta_raw)) + meta_raw)
        fh.write(_pack_arrays(arrays))


def load_checkpoint(path):
    """Return a dict with ``params``, ``buffers``, ``adam`` (or None), ``epoch``, ``meta``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise InvalidInputError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise InvalidInputError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    groups = {"param": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        dtype = np.dtype(_DTYPES[code])
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(blob, dtype=dtype, count=size, offset=pos).reshape(dims)
        pos += size * dtype.itemsize
        group, _, key = name.partition("/")
        groups[group][key] = arr.astype(dtype.newbyteorder("="), copy=True)
    adam = None
    if "adam" in header:
        a = header["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"],
                         m=groups["adam_m"], v=groups["adam_v"])
    return {
        "params": groups["param"],
        "buffers": groups["buffer"],
        "adam": adam,
        "epoch": header["epoch"],
        "meta": header["meta"],
    }
