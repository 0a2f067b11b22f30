"""Write-once shared pool of compressed KV layers, read by many agents.

A pool is built once from a dump, sealed, and then only read: quantized
blocks are immutable, so any number of agent views can decompress the
same layer concurrently without locks. Per-agent memory is just the
transient decode buffers; attaching more agents never grows the pool.

Decoded tensors can be delivered at 32-bit, or rounded to bfloat16
precision (``decode_bits=16``, the default) to match serving stacks
that inject caches as bf16. Rounding is round-to-nearest-even on the
top 16 bits of the float32 pattern, the exact bf16 conversion, so two
readers at the same precision are bit-identical by construction.

Snapshot format PKVP v1::

    magic "PKVP" | version u16 | flags u16 | num_layers u32 | batch u32
    | kv_heads u32 | seq_len u32 | head_dim u32 | baseline_bits u16
    | sign_seed u64 | reserved (6 bytes, zero)
    then per layer: K scale f32 | K codes int8 | V scales f32 per vector
    | V codes (uint8, or 8-per-3-bytes when flag bit 0 is set).

Flag bit 0: value codes packed to 3 bits. Flag bit 1: sign diagonal in
use, seed in the header. Snapshots are bit-exact: save then load yields
the same codes, scales, and decoded tensors.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checksum import tensor_checksum
from .errors import (
    BadMagicError,
    GeometryError,
    PayloadSizeError,
    TruncatedFileError,
    UnsealedPoolError,
    UnsupportedVersionError,
)
from .keyquant import QuantizedKeyBlock, dequantize_k, quantize_k
from .model import KvDump, KvTensor, ModelGeometry
from .valuequant import (
    GAUSSIAN_3BIT,
    Codebook,
    QuantizedValueBlock,
    dequantize_v,
    pack_indices_3bit,
    quantize_v,
    unpack_indices_3bit,
)

PKVP_MAGIC = b"PKVP"
PKVP_VERSION = 1
FLAG_PACKED_VALUES = 0x0001
FLAG_SIGN_DIAGONAL = 0x0002

_POOL_HEADER = struct.Struct("<4sHHIIIIIHQ6x")
POOL_HEADER_SIZE = _POOL_HEADER.size  # 44


def round_to_bfloat16(values: np.ndarray) -> np.ndarray:
    """Round float32 values to bfloat16 precision, returned as float32.

    Round-to-nearest-even on the upper 16 bits of the IEEE-754 pattern;
    bit-identical to a float32 -> bfloat16 -> float32 cast.
    """
    arr = np.ascontiguousarray(values, dtype=np.float32)
    u = arr.view(np.uint32)
    r = u + np.uint32(0x7FFF) + ((u >> np.uint32(16)) & np.uint32(1))
    r &= np.uint32(0xFFFF0000)
    return r.view(np.float32)


@dataclass(frozen=True)
class LayerStats:
    """Quantization error of one layer, measured at build time (32-bit decode)."""

    layer: int
    k_scale: float
    k_mse: float
    k_max_err: float
    v_mse: float
    v_nmse: float


@dataclass(frozen=True)
class TranscriptEntry:
    layer: int
    k_checksum: int
    v_checksum: int
    k_elements: int
    v_elements: int


@dataclass(frozen=True)
class InjectionTranscript:
    """Ordered record of one agent handing every layer to its serving stack.

    Layers appear exactly once, ascending; checksums fingerprint the
    decoded tensors at the view's precision, so transcripts from
    different agents over the same pool must be identical apart from
    the agent id.
    """

    agent_id: int
    decode_bits: int
    entries: tuple[TranscriptEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        layers = [e.layer for e in self.entries]
        if layers != list(range(len(layers))):
            raise ValueError(f"transcript layers must be 0..L-1 in order, got {layers}")

    @property
    def total_elements(self) -> int:
        return sum(e.k_elements + e.v_elements for e in self.entries)

    def checksums(self) -> tuple[tuple[int, int], ...]:
        return tuple((e.k_checksum, e.v_checksum) for e in self.entries)


class SharedPool:
    """Compressed KV layers shared by every agent serving the same prefix.

    Construction leaves the pool unsealed so builders can validate it;
    :meth:`seal` flips it to read-only, after which views may attach.
    :func:`build_pool` always returns a sealed pool.
    """

    def __init__(
        self,
        geometry: ModelGeometry,
        layers: list[tuple[QuantizedKeyBlock, QuantizedValueBlock]],
        build_stats: tuple[LayerStats, ...] = (),
        codebook: Codebook = GAUSSIAN_3BIT,
        sign_seed: int | None = None,
    ):
        layers = [tuple(pair) for pair in layers]
        if len(layers) != geometry.num_layers:
            raise GeometryError(
                f"pool has {len(layers)} layers, geometry says {geometry.num_layers}"
            )
        for i, (kq, vq) in enumerate(layers):
            if kq.geometry != geometry or vq.geometry != geometry:
                raise GeometryError(f"layer {i} block does not match pool geometry")
            if vq.codebook_name != codebook.name or vq.sign_seed != sign_seed:
                raise GeometryError(f"layer {i} value block coded with different settings")
        self.geometry = geometry
        self.codebook = codebook
        self.sign_seed = sign_seed
        self.build_stats = tuple(build_stats)
        self._layers = tuple(layers)
        self._sealed = False
        self._attach_lock = threading.Lock()
        self._num_agents = 0

    @property
    def sealed(self) -> bool:
        return self._sealed

    @property
    def num_layers(self) -> int:
        return self.geometry.num_layers

    @property
    def num_agents(self) -> int:
        return self._num_agents

    def seal(self) -> "SharedPool":
        """Mark the pool read-only. Blocks are already immutable arrays."""
        self._sealed = True
        return self

    def layer_blocks(self, layer_idx: int) -> tuple[QuantizedKeyBlock, QuantizedValueBlock]:
        if not 0 <= layer_idx < len(self._layers):
            raise IndexError(
                f"layer {layer_idx} out of range for {len(self._layers)}-layer pool"
            )
        return self._layers[layer_idx]

    def attach(self, decode_bits: int = 16) -> "AgentCacheView":
        if not self._sealed:
            raise UnsealedPoolError("cannot attach to an unsealed pool")
        if decode_bits not in (16, 32):
            raise ValueError(f"decode_bits must be 16 or 32, got {decode_bits!r}")
        with self._attach_lock:
            agent_id = self._num_agents
            self._num_agents += 1
        return AgentCacheView(self, agent_id, decode_bits)

    def payload_nbytes(self) -> int:
        """Physical pool bytes as held in memory (canonical byte-per-code form).

        Counts codes and scales only; independent of attached agents.
        """
        return sum(kq.payload_nbytes + vq.payload_nbytes for kq, vq in self._layers)

    def packed_payload_nbytes(self) -> int:
        """Physical bytes if value codes were packed 8-per-3-bytes."""
        return sum(
            kq.payload_nbytes + vq.packed_payload_nbytes for kq, vq in self._layers
        )

    def logical_payload_bits(self) -> int:
        """Information content: 8 bits per key element, b bits per value element."""
        e = self.geometry.elements_per_tensor
        per_layer = 8 * e + self._layers[0][1].bits * e
        return per_layer * self.geometry.num_layers


class AgentCacheView:
    """One agent's read handle over a sealed pool.

    Views hold no tensor state; every read decompresses fresh buffers,
    so concurrent views cannot alias or race.
    """

    def __init__(self, pool: SharedPool, agent_id: int, decode_bits: int):
        self.pool = pool
        self.agent_id = agent_id
        self.decode_bits = decode_bits

    def get_kv_for_layer(self, layer_idx: int) -> tuple[KvTensor, KvTensor]:
        """Decompress one layer's (K, V) at this view's precision."""
        kq, vq = self.pool.layer_blocks(layer_idx)
        k = dequantize_k(kq)
        v = dequantize_v(vq, self.pool.codebook)
        if self.decode_bits == 16:
            k = KvTensor(kq.geometry, round_to_bfloat16(k.values))
            v = KvTensor(vq.geometry, round_to_bfloat16(v.values))
        return k, v

    def inject_all(self) -> InjectionTranscript:
        """Decompress every layer in order and fingerprint what was handed over."""
        entries = []
        for idx in range(self.pool.num_layers):
            k, v = self.get_kv_for_layer(idx)
            entries.append(
                TranscriptEntry(
                    layer=idx,
                    k_checksum=tensor_checksum(k.values),
                    v_checksum=tensor_checksum(v.values),
                    k_elements=k.values.size,
                    v_elements=v.values.size,
                )
            )
        return InjectionTranscript(
            agent_id=self.agent_id, decode_bits=self.decode_bits, entries=tuple(entries)
        )


def build_pool(
    dump: KvDump,
    codebook: Codebook = GAUSSIAN_3BIT,
    sign_seed: int | None = None,
) -> SharedPool:
    """Quantize every layer of a dump and seal the result.

    Keys go to int8 with one scale per layer tensor; values go through
    rotate, RMS-normalize, and 3-bit coding. Build stats record each
    layer's reconstruction error at 32-bit decode.
    """
    layers = []
    stats = []
    for idx, (k, v) in enumerate(dump.layers):
        kq = quantize_k(k)
        vq = quantize_v(v, codebook, sign_seed=sign_seed)
        k_err = dequantize_k(kq).values.astype(np.float64) - k.values
        v_ref = v.values.astype(np.float64)
        v_err = dequantize_v(vq, codebook).values.astype(np.float64) - v_ref
        v_power = float(np.mean(np.square(v_ref)))
        v_mse = float(np.mean(np.square(v_err)))
        stats.append(
            LayerStats(
                layer=idx,
                k_scale=kq.scale,
                k_mse=float(np.mean(np.square(k_err))),
                k_max_err=float(np.max(np.abs(k_err))),
                v_mse=v_mse,
                v_nmse=v_mse / v_power if v_power > 0.0 else 0.0,
            )
        )
        layers.append((kq, vq))
    pool = SharedPool(
        dump.geometry, layers, tuple(stats), codebook=codebook, sign_seed=sign_seed
    )
    return pool.seal()


def attach_agent(pool: SharedPool, decode_bits: int = 16) -> AgentCacheView:
    """Attach one more reader to a sealed pool."""
    return pool.attach(decode_bits)


def save_pool(pool: SharedPool, path: str | Path, packed: bool = False) -> None:
    """Serialize a sealed pool to PKVP v1.

    Only pools coded with the canonical Gaussian codebook can be saved;
    the v1 format does not carry codebook tables.
    """
    if not pool.sealed:
        raise UnsealedPoolError("cannot snapshot an unsealed pool")
    if pool.codebook.name != GAUSSIAN_3BIT.name:
        raise ValueError(
            f"PKVP v1 stores only the canonical codebook, pool uses {pool.codebook.name!r}"
        )
    g = pool.geometry
    flags = 0
    sign_seed = 0
    if packed:
        flags |= FLAG_PACKED_VALUES
    if pool.sign_seed is not None:
        if not 0 <= pool.sign_seed < 1 << 64:
            raise ValueError(f"sign seed must fit in u64, got {pool.sign_seed}")
        flags |= FLAG_SIGN_DIAGONAL
        sign_seed = pool.sign_seed
    header = _POOL_HEADER.pack(
        PKVP_MAGIC,
        PKVP_VERSION,
        flags,
        g.num_layers,
        g.batch,
        g.kv_heads,
        g.seq_len,
        g.head_dim,
        g.baseline_bits,
        sign_seed,
    )
    with open(path, "wb") as f:
        f.write(header)
        for idx in range(pool.num_layers):
            kq, vq = pool.layer_blocks(idx)
            f.write(struct.pack("<f", kq.scale))
            f.write(kq.codes.tobytes())
            f.write(vq.scales.astype("<f4", copy=False).tobytes())
            if packed:
                f.write(pack_indices_3bit(vq.codes))
            else:
                f.write(vq.codes.tobytes())


def load_pool(path: str | Path) -> SharedPool:
    """Parse a PKVP v1 snapshot into a sealed pool.

    Loaded pools carry no build stats (errors are a property of the
    original dump, which a snapshot does not include).
    """
    data = Path(path).read_bytes()
    if len(data) < POOL_HEADER_SIZE:
        raise TruncatedFileError(
            f"file too short for header: {len(data)} < {POOL_HEADER_SIZE} bytes",
            offset=len(data),
        )
    magic, version, flags, num_layers, batch, kv_heads, seq_len, head_dim, bbits, seed = (
        _POOL_HEADER.unpack_from(data, 0)
    )
    if magic != PKVP_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {PKVP_MAGIC!r}", offset=0)
    if version != PKVP_VERSION:
        raise UnsupportedVersionError(
            f"unsupported version {version}, expected {PKVP_VERSION}", offset=4
        )
    known = FLAG_PACKED_VALUES | FLAG_SIGN_DIAGONAL
    if flags & ~known:
        raise UnsupportedVersionError(f"unknown flags 0x{flags:04x}", offset=6)
    packed = bool(flags & FLAG_PACKED_VALUES)
    sign_seed = int(seed) if flags & FLAG_SIGN_DIAGONAL else None
    geometry = ModelGeometry(
        num_layers=num_layers,
        kv_heads=kv_heads,
        head_dim=head_dim,
        seq_len=seq_len,
        batch=batch,
        baseline_bits=bbits,
    )
    e = geometry.elements_per_tensor
    vecs = geometry.vectors_per_tensor
    v_payload = 3 * ((e + 7) // 8) if packed else e
    per_layer = 4 + e + vecs * 4 + v_payload
    expected = POOL_HEADER_SIZE + geometry.num_layers * per_layer
    if len(data) < expected:
        raise TruncatedFileError(
            f"payload truncated: expected {expected} bytes total, got {len(data)}",
            offset=len(data),
        )
    if len(data) > expected:
        raise PayloadSizeError(
            f"{len(data) - expected} trailing bytes after payload", offset=expected
        )

    layers = []
    offset = POOL_HEADER_SIZE
    shape = geometry.tensor_shape
    for _ in range(num_layers):
        (k_scale,) = struct.unpack_from("<f", data, offset)
        offset += 4
        k_codes = (
            np.frombuffer(data, dtype=np.int8, count=e, offset=offset).reshape(shape)
        )
        offset += e
        v_scales = (
            np.frombuffer(data, dtype="<f4", count=vecs, offset=offset)
            .reshape(shape[:-1])
        )
        offset += vecs * 4
        if packed:
            raw = data[offset : offset + v_payload]
            v_codes = unpack_indices_3bit(raw, e).reshape(shape)
        else:
            v_codes = (
                np.frombuffer(data, dtype=np.uint8, count=e, offset=offset)
                .reshape(shape)
            )
        offset += v_payload
        kq = QuantizedKeyBlock(geometry, float(k_scale), k_codes)
        vq = QuantizedValueBlock(
            geometry=geometry,
            codebook_name=GAUSSIAN_3BIT.name,
            bits=GAUSSIAN_3BIT.bits,
            codes=v_codes,
            scales=v_scales,
            sign_seed=sign_seed,
        )
        layers.append((kq, vq))
    pool = SharedPool(geometry, layers, (), codebook=GAUSSIAN_3BIT, sign_seed=sign_seed)
    return pool.seal()
