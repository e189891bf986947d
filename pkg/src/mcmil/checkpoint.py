"""Binary checkpoint format for :class:`~mcmil.nn.RegressorParams`.

Layout (all integers u32 little-endian)::

    b"MCML" | version=1 | n_variants | split | dims[0..3]
    tensors, row-major f32 little-endian, in RegressorParams.tensors() order:
      W0 b0 W1 b1 W2 b2, then for each camera c: W0 b0 .. W(split-1) b(split-1)
"""

import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .nn import N_LAYERS, RegressorParams

MAGIC = b"MCML"
VERSION = 1
_HEADER = struct.Struct("<4sIII4I")


class CheckpointError(ValidationError):
    pass


def _shapes(dims, n_variants, split):
    shapes = []
    for l in range(N_LAYERS):
        shapes += [(dims[l + 1], dims[l]), (dims[l + 1],)]
    for _ in range(n_variants):
        for l in range(split):
            shapes += [(dims[l + 1], dims[l]), (dims[l + 1],)]
    return shapes


def dumps(params):
    header = _HEADER.pack(MAGIC, VERSION, params.n_cameras, params.split, *params.layer_dims)
    body = b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for t in params.tensors())
    return header + body


def loads(blob):
    if len(blob) < _HEADER.size:
        raise CheckpointError("checkpoint truncated before end of header")
    magic, version, n_variants, split, *dims = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    shapes = _shapes(dims, n_variants, split)
    expected = _HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(blob) != expected:
        raise CheckpointError(f"checkpoint payload is {len(blob)} bytes, expected {expected}")
    offset = _HEADER.size
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        arrays.append(arr.astype(np.float64))
        offset += 4 * count
    it = iter(arrays)
    weights, biases = [], []
    for _ in range(N_LAYERS):
        weights.append(next(it))
        biases.append(next(it))
    variants = []
    for _ in range(n_variants):
        vw, vb = [], []
        for _ in range(split):
            vw.append(next(it))
            vb.append(next(it))
        variants.append((vw, vb))
    return RegressorParams(weights, biases, variants, split if n_variants else 0)


def save_checkpoint(path, params):
    Path(path).write_bytes(dumps(params))


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
