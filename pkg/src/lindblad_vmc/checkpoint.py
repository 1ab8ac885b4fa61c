"""Checkpoint container.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic b"LVMCCKPT"
    offset 8   uint32    format version (1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header
    offset 20+H          array payload

The header holds ``model`` (ModelConfig fields), ``step``, ``seed`` and an
``arrays`` table mapping each array name to ``{"offset", "shape", "dtype"}``
with offsets relative to the payload start. Arrays are ``<f8`` (theta and the
optimizer moments) or ``i1`` (saved chain states); the sampler streams are
rebuilt from ``seed`` and ``step``, so no generator state is stored.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .ansatz import ModelConfig, ParameterSet

MAGIC = b"LVMCCKPT"
VERSION = 1


def save_checkpoint(path: str | Path, state, extra: dict | None = None) -> None:
    cfg = state.params.config
    arrays = {"theta": state.params.theta, "adam_m": state.m, "adam_v": state.v}
    if state.chains is not None:
        arrays["chains"] = state.chains
    table, blobs, offset = {}, [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype("<f8") if arr.dtype.kind == "f" else arr.astype("i1")
        table[name] = {"offset": offset, "shape": list(arr.shape), "dtype": arr.dtype.str}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "model": {
            "sites": cfg.sites,
            "conv_channels": list(cfg.conv_channels),
            "heads": cfg.heads,
            "activation": cfg.activation,
            "seed": cfg.seed,
            "kernel": list(cfg.kernel),
        },
        "step": int(state.step),
        "seed": state.seed if isinstance(state.seed, int) else list(state.seed),
        "arrays": table,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    base = 20 + hlen
    arrays = {}
    for name, meta in header["arrays"].items():
        dt = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arrays[name] = np.frombuffer(
            data, dtype=dt, count=count, offset=base + meta["offset"]
        ).reshape(meta["shape"]).copy()
    return header, arrays


def load_checkpoint(path: str | Path):
    from .vmc import TrainState

    header, arrays = read_checkpoint(path)
    m = header["model"]
    cfg = ModelConfig(
        sites=m["sites"],
        conv_channels=tuple(m["conv_channels"]),
        heads=m["heads"],
        activation=m["activation"],
        seed=m["seed"],
        kernel=tuple(m["kernel"]),
    )
    seed = header["seed"]
    state = TrainState(
        ParameterSet(cfg, arrays["theta"]),
        step=header["step"],
        seed=tuple(seed) if isinstance(seed, list) else seed,
        m=arrays["adam_m"],
        v=arrays["adam_v"],
        chains=arrays.get("chains"),
    )
    return state, header
