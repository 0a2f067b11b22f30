"""Cache geometry, tensor containers, and the PKVD interchange format.

A dump is one prefill snapshot: for every layer, the key and value
tensors in ``[batch, kv_heads, seq_len, head_dim]`` row-major order.
PKVD payloads are little-endian float32 regardless of the precision the
serving stack ran at; ``baseline_bits`` is carried as metadata and only
enters memory accounting.

PKVD v1 layout::

    magic "PKVD" | version u16 | flags u16 | num_layers u32 | batch u32
    | kv_heads u32 | seq_len u32 | head_dim u32 | baseline_bits u16
    | reserved (14 bytes, zero)
    then per layer: K then V as contiguous little-endian f32 arrays.

Flag bit 0 marks the payload as f32; it is the only payload encoding
this version reads or writes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    GeometryError,
    NonFiniteValuesError,
    PayloadSizeError,
    TruncatedFileError,
    UnsupportedVersionError,
)

PKVD_MAGIC = b"PKVD"
PKVD_VERSION = 1
FLAG_F32_PAYLOAD = 0x0001

# magic, version, flags, num_layers, batch, kv_heads, seq_len, head_dim,
# baseline_bits, 14 reserved bytes; little-endian, no implicit padding
_HEADER = struct.Struct("<4sHHIIIIIH14x")
HEADER_SIZE = _HEADER.size  # 44


@dataclass(frozen=True)
class ModelGeometry:
    """Static shape of one model's KV cache.

    ``head_dim`` must be a power of two: the value path rotates each
    head vector with a Walsh-Hadamard butterfly, which only exists for
    power-of-two lengths. ``baseline_bits`` is the precision the
    uncompressed cache would occupy (16 or 32).
    """

    num_layers: int
    kv_heads: int
    head_dim: int
    seq_len: int
    batch: int = 1
    baseline_bits: int = 16

    def __post_init__(self):
        for name in ("num_layers", "kv_heads", "head_dim", "seq_len", "batch"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise GeometryError(f"{name} must be a positive int, got {v!r}")
        if self.head_dim & (self.head_dim - 1):
            raise GeometryError(
                f"head_dim must be a power of two, got {self.head_dim}"
            )
        if self.baseline_bits not in (16, 32):
            raise GeometryError(
                f"baseline_bits must be 16 or 32, got {self.baseline_bits!r}"
            )

    @property
    def tensor_shape(self) -> tuple[int, int, int, int]:
        return (self.batch, self.kv_heads, self.seq_len, self.head_dim)

    @property
    def elements_per_tensor(self) -> int:
        """Elements in one K (or one V) tensor of one layer."""
        return self.batch * self.kv_heads * self.seq_len * self.head_dim

    @property
    def vectors_per_tensor(self) -> int:
        """Head vectors in one tensor (one per batch, head, token)."""
        return self.batch * self.kv_heads * self.seq_len

    @property
    def payload_elements(self) -> int:
        """Total K+V elements across all layers, what a dump carries."""
        return 2 * self.num_layers * self.elements_per_tensor

    def baseline_cache_nbytes(self) -> int:
        """Bytes one agent's uncompressed cache occupies at baseline precision."""
        return self.payload_elements * self.baseline_bits // 8

    def with_seq_len(self, seq_len: int) -> "ModelGeometry":
        return ModelGeometry(
            num_layers=self.num_layers,
            kv_heads=self.kv_heads,
            head_dim=self.head_dim,
            seq_len=seq_len,
            batch=self.batch,
            baseline_bits=self.baseline_bits,
        )


@dataclass(frozen=True)
class KvTensor:
    """One layer's K or V slice, immutable after construction.

    Construction coerces to contiguous float32, rejects non-finite
    values, and freezes the buffer, so a tensor can be handed to any
    number of readers without copies.
    """

    geometry: ModelGeometry
    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float32)
        if arr.shape != self.geometry.tensor_shape:
            raise GeometryError(
                f"tensor shape {arr.shape} does not match geometry "
                f"{self.geometry.tensor_shape}"
            )
        if not np.isfinite(arr).all():
            raise GeometryError("tensor contains NaN or Inf")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def nbytes(self) -> int:
        return self.values.nbytes


@dataclass(frozen=True)
class KvDump:
    """A full prefill snapshot: (K, V) per layer plus its geometry."""

    geometry: ModelGeometry
    layers: tuple[tuple[KvTensor, KvTensor], ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(pair) for pair in self.layers))
        if len(self.layers) != self.geometry.num_layers:
            raise GeometryError(
                f"dump has {len(self.layers)} layers, geometry says "
                f"{self.geometry.num_layers}"
            )
        for i, pair in enumerate(self.layers):
            if len(pair) != 2:
                raise GeometryError(f"layer {i} is not a (K, V) pair")
            for t in pair:
                if not isinstance(t, KvTensor) or t.geometry != self.geometry:
                    raise GeometryError(f"layer {i} tensor does not match dump geometry")


def write_dump(dump: KvDump, path: str | Path) -> None:
    """Serialize a dump to PKVD v1."""
    g = dump.geometry
    header = _HEADER.pack(
        PKVD_MAGIC,
        PKVD_VERSION,
        FLAG_F32_PAYLOAD,
        g.num_layers,
        g.batch,
        g.kv_heads,
        g.seq_len,
        g.head_dim,
        g.baseline_bits,
    )
    with open(path, "wb") as f:
        f.write(header)
        for k, v in dump.layers:
            f.write(k.values.astype("<f4", copy=False).tobytes())
            f.write(v.values.astype("<f4", copy=False).tobytes())


def read_dump(path: str | Path) -> KvDump:
    """Parse a PKVD v1 file, validating structure before content.

    Raises a distinct error per failure mode: bad magic, unknown
    version or flags, truncated payload, trailing bytes, non-finite
    values. Each carries the byte offset of the problem.
    """
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise TruncatedFileError(
            f"file too short for header: {len(data)} < {HEADER_SIZE} bytes",
            offset=len(data),
        )
    magic, version, flags, num_layers, batch, kv_heads, seq_len, head_dim, bbits = (
        _HEADER.unpack_from(data, 0)
    )
    if magic != PKVD_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {PKVD_MAGIC!r}", offset=0)
    if version != PKVD_VERSION:
        raise UnsupportedVersionError(
            f"unsupported version {version}, expected {PKVD_VERSION}", offset=4
        )
    if not flags & FLAG_F32_PAYLOAD:
        raise UnsupportedVersionError(
            f"unsupported payload flags 0x{flags:04x}: need f32 payload bit", offset=6
        )
    geometry = ModelGeometry(
        num_layers=num_layers,
        kv_heads=kv_heads,
        head_dim=head_dim,
        seq_len=seq_len,
        batch=batch,
        baseline_bits=bbits,
    )
    expected = HEADER_SIZE + geometry.payload_elements * 4
    if len(data) < expected:
        raise TruncatedFileError(
            f"payload truncated: expected {expected} bytes total, got {len(data)}",
            offset=len(data),
        )
    if len(data) > expected:
        raise PayloadSizeError(
            f"{len(data) - expected} trailing bytes after payload", offset=expected
        )

    per_tensor = geometry.elements_per_tensor
    layers = []
    offset = HEADER_SIZE
    for _ in range(num_layers):
        pair = []
        for _ in range(2):
            flat = np.frombuffer(data, dtype="<f4", count=per_tensor, offset=offset)
            finite = np.isfinite(flat)
            if not finite.all():
                bad = int(np.flatnonzero(~finite)[0])
                raise NonFiniteValuesError(
                    "payload contains NaN or Inf", offset=offset + bad * 4
                )
            pair.append(
                KvTensor(geometry, flat.reshape(geometry.tensor_shape))
            )
            offset += per_tensor * 4
        layers.append((pair[0], pair[1]))
    return KvDump(geometry, tuple(layers))


def synth_gaussian_dump(
    geometry: ModelGeometry,
    seed: int,
    variance: float | None = None,
) -> KvDump:
    """Draw a synthetic dump with i.i.d. zero-mean Gaussian entries.

    Default variance is 1/head_dim, so head vectors have unit expected
    squared norm like RMS-normalized activations. Same seed, same bits.
    """
    if variance is None:
        variance = 1.0 / geometry.head_dim
    if variance <= 0:
        raise ValueError(f"variance must be positive, got {variance}")
    rng = np.random.default_rng(seed)
    std = float(np.sqrt(variance))
    layers = []
    for _ in range(geometry.num_layers):
        pair = []
        for _ in range(2):
            vals = rng.normal(0.0, std, size=geometry.tensor_shape).astype(np.float32)
            pair.append(KvTensor(geometry, vals))
        layers.append((pair[0], pair[1]))
    return KvDump(geometry, tuple(layers))
