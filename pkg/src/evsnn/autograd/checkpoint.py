"""Binary checkpoint format.

Layout (all little-endian):
    magic    8 bytes  b"SNNCKPT1"
    n_params u32
    n_params entries of: name_len u16, name utf-8, ndim u8, dims u32 each,
                         float32 values
    n_state  u32      optimizer state blob, same entry layout (may be 0)
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SNNCKPT1"


def _write_entry(fh, name, arr):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.astype("<f4").tobytes())


def _read_entry(fh):
    (nlen,) = struct.unpack("<H", fh.read(2))
    name = fh.read(nlen).decode("utf-8")
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
    return name, data.copy()


def save_checkpoint(path, named_params, optimizer_state=None):
    """named_params: dict name -> Tensor or ndarray."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(named_params)))
        for name, p in named_params.items():
            arr = p.data if hasattr(p, "data") else np.asarray(p)
            _write_entry(fh, name, np.asarray(arr))
        state = optimizer_state or {}
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            _write_entry(fh, name, np.asarray(arr))


def load_checkpoint(path):
    """Returns (params dict, optimizer state dict) of numpy arrays."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (n,) = struct.unpack("<I", fh.read(4))
        params = dict(_read_entry(fh) for _ in range(n))
        (ns,) = struct.unpack("<I", fh.read(4))
        state = dict(_read_entry(fh) for _ in range(ns))
    return params, state
