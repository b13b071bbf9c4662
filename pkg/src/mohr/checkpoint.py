"""Binary parameter files.

Layout, all little endian::

    b"MOHR"  u32 version  u32 n_users  u32 n_items  u32 n_relations  u32 K
    float32 user_vecs[n_users*K]  item_vecs[n_items*K]  rel_vecs[(n_relations+1)*K]
    float32 item_bias[n_items]    rel_bias[n_relations+1]

``n_relations`` counts explicit relations; the latent row is always present.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ModelParams

MAGIC = b"MOHR"
VERSION = 1
_HEADER = struct.Struct("<4s5I")


class CheckpointError(ValueError):
    pass


def to_bytes(params: ModelParams) -> bytes:
    head = _HEADER.pack(MAGIC, VERSION, params.n_users, params.n_items, params.n_relations, params.dim)
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.arrays().values())
    return head + body


def save(params: ModelParams, path) -> None:
    Path(path).write_bytes(to_bytes(params))


def read_header(blob: bytes) -> tuple[int, int, int, int, int]:
    if len(blob) < _HEADER.size:
        raise CheckpointError("truncated header")
    magic, version, nu, ni, nr, k = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    return version, nu, ni, nr, k


def from_bytes(blob: bytes, expect: tuple[int, int, int] | None = None, **flags) -> ModelParams:
    """Decode a checkpoint. ``expect`` = (n_users, n_items, n_relations) to validate against."""
    _, nu, ni, nr, k = read_header(blob)
    if expect is not None and (nu, ni, nr) != tuple(expect):
        raise CheckpointError(f"checkpoint dims {(nu, ni, nr)} do not match data {tuple(expect)}")
    shapes = [(nu, k), (ni, k), (nr + 1, k), (ni,), (nr + 1,)]
    need = _HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(blob) != need:
        raise CheckpointError(f"checkpoint is {len(blob)} bytes, header implies {need}")
    off = _HEADER.size
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape))
        off += 4 * n
    return ModelParams(*arrays, **flags)


def load(path, expect=None, **flags) -> ModelParams:
    return from_bytes(Path(path).read_bytes(), expect=expect, **flags)
