"""Binary model checkpoints.

Little-endian layout::

    magic        4 bytes  b"BSET"
    version      u32      (currently 1)
    input rank   u32
    input dims   u32 * rank
    layer count  u32
    per layer:   kind u8, out_channels u32, kernel u32, units u32,
                 window u32, rate f64
    param count  u32
    per param:   name length u32, name utf-8, rank u32, dims u32 * rank,
                 values f64 * prod(dims)

Round-trips are bit-exact; a model fingerprint is the SHA-256 of the encoded
bytes.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .network import LayerSpec, ModelParameters, Network
from .tensor import Tensor

MAGIC = b"BSET"
VERSION = 1

_KIND_CODES = ["convolution", "dense", "relu", "maxpool", "flatten", "dropout", "softmax"]


class CheckpointError(ValueError):
    pass


def encode(network: Network, params: ModelParameters) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(network.input_shape))
    out += struct.pack(f"<{len(network.input_shape)}I", *network.input_shape)
    out += struct.pack("<I", len(network.specs))
    for spec in network.specs:
        out += struct.pack(
            "<BIIIId",
            _KIND_CODES.index(spec.kind),
            spec.out_channels, spec.kernel, spec.units, spec.window, spec.rate,
        )
    out += struct.pack("<I", len(params.tensors))
    for name, tensor in params.tensors.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        shape = tensor.shape
        out += struct.pack("<I", len(shape))
        out += struct.pack(f"<{len(shape)}I", *shape)
        out += np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("truncated checkpoint")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def raw(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk


def decode(data: bytes) -> tuple[Network, ModelParameters]:
    r = _Reader(data)
    if r.raw(4) != MAGIC:
        raise CheckpointError("bad magic bytes; not a checkpoint file")
    (version,) = r.take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (rank,) = r.take("<I")
    input_shape = r.take(f"<{rank}I")
    (layer_count,) = r.take("<I")
    specs = []
    for _ in range(layer_count):
        code, out_ch, kernel, units, window, rate = r.take("<BIIIId")
        if code >= len(_KIND_CODES):
            raise CheckpointError(f"unknown layer code {code}")
        specs.append(LayerSpec(_KIND_CODES[code], out_channels=out_ch, kernel=kernel,
                               units=units, window=window, rate=rate))
    network = Network(specs, input_shape)
    (param_count,) = r.take("<I")
    tensors: dict[str, Tensor] = {}
    for _ in range(param_count):
        (name_len,) = r.take("<I")
        name = r.raw(name_len).decode("utf-8")
        (prank,) = r.take("<I")
        shape = r.take(f"<{prank}I")
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(r.raw(count * 8), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = Tensor(values)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return network, ModelParameters(tensors, tuple(network.dropout_rates))


def save(path, network: Network, params: ModelParameters) -> str:
    """Write a checkpoint and return its fingerprint."""
    data = encode(network, params)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> tuple[Network, ModelParameters]:
    return decode(Path(path).read_bytes())


def fingerprint(network: Network, params: ModelParameters) -> str:
    return hashlib.sha256(encode(network, params)).hexdigest()
