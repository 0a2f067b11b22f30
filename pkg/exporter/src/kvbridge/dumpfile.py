"""Reader and writer for PKVD dump files, the flat KV-cache interchange format.

A dump holds one prefill snapshot: a 44-byte little-endian header followed by
``num_layers`` (K, V) tensor pairs as contiguous float32, each shaped
``[batch, kv_heads, seq_len, head_dim]`` in row-major order.

    magic "PKVD" | version u16 | flags u16 | num_layers u32 | batch u32
    | kv_heads u32 | seq_len u32 | head_dim u32 | baseline_bits u16 | 14 pad

This module is the bridge's own implementation of the format, so the package
works against the pool tooling without importing it; byte-level compatibility
is pinned by tests that feed bridge-written files to the ``kvpool`` executable
and read its output back.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

PKVD_MAGIC = b"PKVD"
PKVD_VERSION = 1
FLAG_F32_PAYLOAD = 0x0001

# magic, version, flags, num_layers, batch, kv_heads, seq_len, head_dim,
# baseline_bits, 14 reserved bytes
_HEADER = struct.Struct("<4sHHIIIIIH14x")
HEADER_SIZE = _HEADER.size  # 44


class DumpFormatError(ValueError):
    """Malformed, truncated, or unsupported PKVD file."""


@dataclass(frozen=True)
class DumpGeometry:
    """Shape metadata shared by every tensor in a dump."""

    num_layers: int
    batch: int
    kv_heads: int
    seq_len: int
    head_dim: int
    baseline_bits: int = 16

    def __post_init__(self) -> None:
        for name in ("num_layers", "batch", "kv_heads", "seq_len", "head_dim"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise DumpFormatError(f"{name} must be a positive integer, got {value!r}")
        # downstream rotation kernels require a power-of-two head dimension
        if self.head_dim & (self.head_dim - 1):
            raise DumpFormatError(f"head_dim must be a power of two, got {self.head_dim}")
        if self.baseline_bits not in (16, 32):
            raise DumpFormatError(f"baseline_bits must be 16 or 32, got {self.baseline_bits}")

    @property
    def tensor_shape(self) -> tuple[int, int, int, int]:
        return (self.batch, self.kv_heads, self.seq_len, self.head_dim)

    @property
    def elements_per_tensor(self) -> int:
        b, h, t, d = self.tensor_shape
        return b * h * t * d

    @property
    def payload_elements(self) -> int:
        return 2 * self.num_layers * self.elements_per_tensor

    def as_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "batch": self.batch,
            "kv_heads": self.kv_heads,
            "seq_len": self.seq_len,
            "head_dim": self.head_dim,
            "baseline_bits": self.baseline_bits,
        }


def _as_f32_array(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(
        t.detach().to("cpu", torch.float32).numpy(), dtype="<f4"
    )


def write_dump(
    path: str | Path,
    layers: Sequence[tuple[torch.Tensor, torch.Tensor]],
    baseline_bits: int = 16,
) -> DumpGeometry:
    """Serialize per-layer (K, V) tensors to ``path`` and return the geometry.

    Every tensor must be 4-D ``[batch, kv_heads, seq_len, head_dim]``, finite,
    and share one shape. Values are stored as little-endian float32 whatever
    the source dtype, so a float32 cache round-trips bit exactly.
    """
    if len(layers) < 1:
        raise DumpFormatError("dump needs at least one layer")
    shape = tuple(layers[0][0].shape)
    if len(shape) != 4:
        raise DumpFormatError(f"expected 4-D [batch, heads, seq, dim] tensors, got {shape}")
    geometry = DumpGeometry(
        num_layers=len(layers),
        batch=int(shape[0]),
        kv_heads=int(shape[1]),
        seq_len=int(shape[2]),
        head_dim=int(shape[3]),
        baseline_bits=baseline_bits,
    )
    blocks: list[np.ndarray] = []
    for idx, (k, v) in enumerate(layers):
        for name, t in (("K", k), ("V", v)):
            if tuple(t.shape) != shape:
                raise DumpFormatError(
                    f"layer {idx} {name} shape {tuple(t.shape)} != layer 0 shape {shape}"
                )
            arr = _as_f32_array(t)
            if not np.isfinite(arr).all():
                raise DumpFormatError(f"layer {idx} {name} contains NaN or Inf")
            blocks.append(arr)
    header = _HEADER.pack(
        PKVD_MAGIC,
        PKVD_VERSION,
        FLAG_F32_PAYLOAD,
        geometry.num_layers,
        geometry.batch,
        geometry.kv_heads,
        geometry.seq_len,
        geometry.head_dim,
        geometry.baseline_bits,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in blocks:
            fh.write(arr.tobytes())
    return geometry


def read_dump(path: str | Path) -> tuple[DumpGeometry, list[tuple[torch.Tensor, torch.Tensor]]]:
    """Load a dump as float32 torch tensors, validating the whole file.

    Raises DumpFormatError (with a byte offset where one is meaningful) on a
    bad magic, unknown version or flags, size mismatch, or non-finite payload.
    """
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise DumpFormatError(f"file too short for header: {len(data)} < {HEADER_SIZE} bytes")
    magic, version, flags, num_layers, batch, kv_heads, seq_len, head_dim, bbits = (
        _HEADER.unpack_from(data, 0)
    )
    if magic != PKVD_MAGIC:
        raise DumpFormatError(f"bad magic {magic!r} at offset 0, expected {PKVD_MAGIC!r}")
    if version != PKVD_VERSION:
        raise DumpFormatError(f"unsupported version {version} at offset 4")
    if not flags & FLAG_F32_PAYLOAD:
        raise DumpFormatError(f"unsupported payload flags 0x{flags:04x} at offset 6")
    geometry = DumpGeometry(
        num_layers=int(num_layers),
        batch=int(batch),
        kv_heads=int(kv_heads),
        seq_len=int(seq_len),
        head_dim=int(head_dim),
        baseline_bits=int(bbits),
    )
    expected = HEADER_SIZE + geometry.payload_elements * 4
    if len(data) != expected:
        raise DumpFormatError(
            f"payload size mismatch: file has {len(data)} bytes, header implies {expected}"
        )
    payload = np.frombuffer(data, dtype="<f4", offset=HEADER_SIZE)
    bad = np.flatnonzero(~np.isfinite(payload))
    if bad.size:
        raise DumpFormatError(
            f"non-finite value at byte offset {HEADER_SIZE + int(bad[0]) * 4}"
        )
    per_tensor = geometry.elements_per_tensor
    layers: list[tuple[torch.Tensor, torch.Tensor]] = []
    cursor = 0
    for _ in range(geometry.num_layers):
        pair = []
        for _ in range(2):
            block = payload[cursor : cursor + per_tensor].reshape(geometry.tensor_shape)
            pair.append(torch.from_numpy(block.copy()))
            cursor += per_tensor
        layers.append((pair[0], pair[1]))
    return geometry, layers
