"""VTPM checkpoint container.

Layout (little endian)::

    magic "VTPM" | u32 version | u32 header length | header JSON (UTF-8) | tensor blobs

The header holds the model config, optional MAE decoder config, epoch,
free-form metadata and a table ``[{name, group, dtype, shape, offset,
nbytes}]`` locating every tensor in the blob section.  ``group`` is
``param`` or ``optim``.  Files are written to a temporary sibling and
renamed into place, so a crash never leaves a truncated checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .encoder import ModelConfig, build_model
from .errors import FormatError
from .objectives import MaeConfig, add_mae_decoder

MAGIC = b"VTPM"
VERSION = 1
_HEAD = struct.Struct("<4sII")


@dataclass
class Checkpoint:
    model: object
    optimizer_state: dict | None
    epoch: int | None
    meta: dict


def _atomic_write(path, chunks):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".vtpm-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            for c in chunks:
                fh.write(c)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model, optimizer=None, epoch=None, meta=None):
    tensors = [("param", n, t.data) for n, t in model.params.items()]
    if optimizer is not None:
        tensors += [("optim", n, np.asarray(a)) for n, a in optimizer.state_dict().items()]
    table, blobs, offset = [], [], 0
    for group, name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "group": group, "dtype": arr.dtype.name,
                      "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    mae = getattr(model, "mae_cfg", None)
    header = {
        "config": model.cfg.to_dict(),
        "mae": None if mae is None else mae.__dict__,
        "seed": int(model.seed),
        "epoch": epoch,
        "meta": meta or {},
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    _atomic_write(path, [_HEAD.pack(MAGIC, VERSION, len(hbytes)), hbytes] + blobs)


def read_header(path):
    with open(path, "rb") as fh:
        raw = fh.read(_HEAD.size)
        if len(raw) < _HEAD.size:
            raise FormatError(f"{path}: truncated checkpoint header")
        magic, version, hlen = _HEAD.unpack(raw)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        hbytes = fh.read(hlen)
        if len(hbytes) != hlen:
            raise FormatError(f"{path}: truncated checkpoint header")
    return json.loads(hbytes.decode("utf-8")), _HEAD.size + hlen


def load_checkpoint(path):
    header, start = read_header(path)
    with open(path, "rb") as fh:
        fh.seek(start)
        body = fh.read()
    params, optim = {}, {}
    for entry in header["tensors"]:
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(body):
            raise FormatError(f"{path}: tensor {entry['name']} runs past end of file")
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(body, dtype=dt, count=n // dt.itemsize, offset=lo).reshape(entry["shape"])
        arr = arr.astype(dt.newbyteorder("="))
        (params if entry["group"] == "param" else optim)[entry["name"]] = arr
    cfg = ModelConfig(**header["config"])
    model = build_model(cfg, header["seed"], allow_empty=cfg.depth == 0)
    if header.get("mae") is not None:
        add_mae_decoder(model, MaeConfig(**header["mae"]), seed=header["seed"])
    model.load_state_dict(params, strict=True)
    return Checkpoint(model, optim or None, header.get("epoch"), header.get("meta", {}))
