"""Binary checkpoint format shared by checkpoints and federated broadcast.

Layout (all integers and floats little-endian)::

    magic      4 bytes  b"FMCC"
    version    u32
    n_stacks   u32
    per stack: name_len u16, name utf-8, n_layers u32,
               per layer: out u32, in u32, activation u8 (0 relu, 1 identity)
    payload    float64 values; stacks in table order, per layer W (row-major) then b
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .mlp import Layer, MlpParams

MAGIC = b"FMCC"
FORMAT_VERSION = 1
_ACT_CODES = {"relu": 0, "identity": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def serialize_stacks(stacks: dict[str, MlpParams]) -> bytes:
    header = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(stacks))]
    payload = []
    for name, stack in stacks.items():
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw)
        header.append(struct.pack("<I", len(stack.layers)))
        for layer in stack.layers:
            out_dim, in_dim = layer.weight.shape
            header.append(struct.pack("<IIB", out_dim, in_dim, _ACT_CODES[layer.activation]))
            payload.append(layer.weight.astype("<f8").tobytes(order="C"))
            payload.append(layer.bias.astype("<f8").tobytes())
    return b"".join(header + payload)


def deserialize_stacks(blob: bytes) -> dict[str, MlpParams]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version}")
        pos = 12
        table = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (n_layers,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shapes = []
            for _ in range(n_layers):
                out_dim, in_dim, code = struct.unpack_from("<IIB", blob, pos)
                pos += 9
                shapes.append((out_dim, in_dim, _ACT_NAMES[code]))
            table.append((name, shapes))
        stacks = {}
        for name, shapes in table:
            layers = []
            for out_dim, in_dim, act in shapes:
                w = np.frombuffer(blob, "<f8", out_dim * in_dim, pos).reshape(out_dim, in_dim)
                pos += 8 * out_dim * in_dim
                b = np.frombuffer(blob, "<f8", out_dim, pos)
                pos += 8 * out_dim
                layers.append(Layer(w.astype(np.float64), b.astype(np.float64), act))
            stacks[name] = MlpParams(layers)
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return stacks


def write_checkpoint(path, stacks: dict[str, MlpParams]) -> None:
    Path(path).write_bytes(serialize_stacks(stacks))


def read_checkpoint(path) -> dict[str, MlpParams]:
    return deserialize_stacks(Path(path).read_bytes())
