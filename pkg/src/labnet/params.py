"""Binary model parameter files.

Layout (all integers little-endian)::

    b"LABNETPM"                 magic
    u32  version                (1)
    u32  n, n bytes             hyper block: UTF-8 JSON {"model": ..., "dsp": ...}
    u32  record count
    per record:
        u16 n, n bytes          tensor name (UTF-8)
        u8  ndim, ndim x u32    shape
        prod(shape) x f32       payload
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .dsp import DspConfig
from .model import LABNet, ModelConfig

MAGIC = b"LABNETPM"
VERSION = 1


class CorruptModelError(ValueError):
    """The parameter file is truncated, malformed or does not match its hyper block."""


def hyper_block(model: LABNet) -> dict:
    return {"model": asdict(model.config), "dsp": asdict(model.dsp)}


def describe(model: LABNet) -> dict:
    from .resources import count_params

    return {**hyper_block(model), "reduced_bins": model.n_reduced, "params": count_params(model)}


def dumps(model: LABNet) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    hyper = json.dumps(hyper_block(model), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(hyper)))
    buf.write(hyper)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", tensor.ndim))
        buf.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        buf.write(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def save_params(model: LABNet, path) -> None:
    Path(path).write_bytes(dumps(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptModelError(f"file truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes) -> LABNet:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CorruptModelError("not a LABNet parameter file (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CorruptModelError(f"unsupported format version {version}")
    (n,) = r.unpack("<I", "hyper block length")
    try:
        hyper = json.loads(r.take(n, "hyper block").decode())
        model = LABNet(ModelConfig(**hyper["model"]), DspConfig(**hyper["dsp"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptModelError(f"invalid hyper block: {exc}") from exc

    expected = model.state_dict()
    (count,) = r.unpack("<I", "record count")
    loaded = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "tensor name length")
        name = r.take(n, "tensor name").decode(errors="replace")
        (ndim,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        size = int(np.prod(shape, dtype=np.int64))
        payload = r.take(4 * size, f"payload of {name}")
        if name not in expected:
            raise CorruptModelError(f"unexpected tensor {name!r}")
        if tuple(expected[name].shape) != tuple(shape):
            raise CorruptModelError(f"tensor {name!r} has shape {tuple(shape)}, hyper block "
                                    f"implies {tuple(expected[name].shape)}")
        loaded[name] = torch.from_numpy(np.frombuffer(payload, dtype="<f4").reshape(shape).copy())
    if r.pos != len(data):
        raise CorruptModelError(f"{len(data) - r.pos} trailing bytes after last tensor")
    missing = [k for k in expected if k not in loaded]
    if missing:
        raise CorruptModelError(f"missing tensor {missing[0]!r}"
                                + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    model.load_state_dict(loaded)
    return model


def load_params(path) -> LABNet:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptModelError(f"cannot read {path}: {exc}") from exc
    return loads(data)
