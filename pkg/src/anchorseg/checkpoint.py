"""Binary checkpoint: named parameters, optimizer moments, iteration, config.

Layout (all integers little-endian, all floats raw little-endian float64):

    magic   4 bytes  b"ASCK"
    version u32      currently 1
    config  u32 byte length + UTF-8 config text (key = value lines)
    iter    u64      iteration counter
    nparams u32
    per parameter, in the model's stable naming order:
        name  u32 byte length + UTF-8 bytes
        ndim  u32, then each extent as u32
        data  raw float64
    opt     u8       1 if optimizer moments follow, else 0
    [ t u64; then per parameter (same order): m raw float64, v raw float64 ]

Reloading restores every byte, so a forward pass after load is bit-identical
to the pass before save.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ASCK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _write_str(fh, text: str) -> None:
    raw = text.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
    return data.astype(np.float64).copy()


def save_checkpoint(path, named_params: dict, iteration: int, config_text: str,
                    opt_state: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_str(fh, config_text)
        fh.write(struct.pack("<Q", iteration))
        fh.write(struct.pack("<I", len(named_params)))
        for name, p in named_params.items():
            _write_str(fh, name)
            _write_array(fh, p.data)
        if opt_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", opt_state["t"]))
            for name in named_params:
                _write_array(fh, opt_state["m"][name])
                _write_array(fh, opt_state["v"][name])


def load_checkpoint(path) -> dict:
    """Returns {'config_text', 'iteration', 'params': name->array, 'opt_state'|None}."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        config_text = _read_str(fh)
        (iteration,) = struct.unpack("<Q", fh.read(8))
        (nparams,) = struct.unpack("<I", fh.read(4))
        params = {}
        order = []
        for _ in range(nparams):
            name = _read_str(fh)
            params[name] = _read_array(fh)
            order.append(name)
        (has_opt,) = struct.unpack("<B", fh.read(1))
        opt_state = None
        if has_opt:
            (t,) = struct.unpack("<Q", fh.read(8))
            opt_state = {"t": t, "m": {}, "v": {}}
            for name in order:
                opt_state["m"][name] = _read_array(fh)
                opt_state["v"][name] = _read_array(fh)
    return {"config_text": config_text, "iteration": iteration,
            "params": params, "opt_state": opt_state}


def restore_params(named_params: dict, stored: dict[str, np.ndarray]) -> None:
    """Copy stored arrays into live tensors; names and shapes must match exactly."""
    if set(named_params) != set(stored):
        missing = set(named_params) - set(stored)
        extra = set(stored) - set(named_params)
        raise CheckpointError(f"parameter name mismatch (missing={sorted(missing)[:4]}, "
                              f"extra={sorted(extra)[:4]})")
    for name, p in named_params.items():
        if p.data.shape != stored[name].shape:
            raise CheckpointError(f"{name}: shape {stored[name].shape} != {p.data.shape}")
        p.data[...] = stored[name]
