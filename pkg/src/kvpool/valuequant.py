"""3-bit codebook quantization for value tensors.

Each head vector is rotated with the normalized Walsh-Hadamard
transform, divided by its own RMS, and coded coordinate-wise against an
8-level codebook trained for the standard normal. The rotation spreads
any reasonable activation distribution into near-Gaussian coordinates,
which is what makes a single fixed codebook serviceable across layers,
heads, and models. Reconstruction multiplies centroids by the stored
per-vector RMS and rotates back.

The canonical codebook is the Lloyd-Max quantizer of N(0, 1) at 3 bits.
Its expected squared error per unit-variance coordinate is about 0.0345,
under the high-resolution ceiling (sqrt(3) * pi / 2) * 4**-3 = 0.0425.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import CorruptBlockError, GeometryError
from .fwht import rotate_forward, rotate_inverse
from .model import KvTensor, ModelGeometry

GAUSSIAN_3BIT_NAME = "gaussian-3bit-v1"

# Lloyd-Max centroids for N(0, 1) at 3 bits, frozen to three decimals.
_GAUSSIAN_3BIT_CENTROIDS = (
    -2.152, -1.344, -0.756, -0.245, 0.245, 0.756, 1.344, 2.152,
)


@dataclass(frozen=True)
class Codebook:
    """A scalar codebook: strictly increasing centroids plus cell midpoints.

    Decision boundaries sit halfway between adjacent centroids; a value
    exactly on a boundary belongs to the lower cell.
    """

    bits: int
    centroids: np.ndarray
    name: str = "unnamed"
    midpoints: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 1 <= self.bits <= 8:
            raise ValueError(f"bits must be in [1, 8], got {self.bits}")
        c = np.ascontiguousarray(self.centroids, dtype=np.float64)
        if c.ndim != 1 or c.size != 1 << self.bits:
            raise ValueError(
                f"need {1 << self.bits} centroids for {self.bits} bits, got shape {c.shape}"
            )
        if not np.isfinite(c).all():
            raise ValueError("centroids must be finite")
        if not (np.diff(c) > 0).all():
            raise ValueError("centroids must be strictly increasing")
        mids = (c[:-1] + c[1:]) / 2.0
        # Pin each boundary to the largest float64 not above the exact
        # rational midpoint. Binary search against these boundaries then
        # reproduces exact nearest-centroid-with-ties-to-lower semantics
        # for every float64 input, including values within an ulp of a
        # boundary, where the naively rounded midpoint can flip a cell.
        for i in range(mids.size):
            exact = (Fraction(float(c[i])) + Fraction(float(c[i + 1]))) / 2
            while Fraction(float(mids[i])) > exact:
                mids[i] = np.nextafter(mids[i], -np.inf)
        c.flags.writeable = False
        mids.flags.writeable = False
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "midpoints", mids)

    @property
    def levels(self) -> int:
        return 1 << self.bits

    def is_symmetric(self, atol: float = 0.0) -> bool:
        return bool(np.allclose(self.centroids, -self.centroids[::-1], atol=atol, rtol=0.0))


GAUSSIAN_3BIT = Codebook(
    bits=3,
    centroids=np.array(_GAUSSIAN_3BIT_CENTROIDS, dtype=np.float64),
    name=GAUSSIAN_3BIT_NAME,
)


@dataclass(frozen=True)
class DistortionBound:
    """High-resolution distortion ceiling for Gaussian scalar quantization.

    Per unit-variance coordinate at b bits: (sqrt(3) * pi / 2) * 4**-b.
    """

    bits: int
    bound: float = field(init=False)

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError(f"bits must be >= 1, got {self.bits}")
        object.__setattr__(
            self, "bound", (math.sqrt(3.0) * math.pi / 2.0) * 4.0 ** (-self.bits)
        )


def nearest_centroid(x: float, codebook: Codebook) -> int:
    """Index of the centroid nearest to ``x``; boundary ties take the lower cell.

    Binary search over the midpoints, so exact midpoint inputs resolve
    to the left cell by construction.
    """
    return int(np.searchsorted(codebook.midpoints, x, side="left"))


def encode_coordinates(z: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Vectorized :func:`nearest_centroid` over an array, returns uint8 codes."""
    return np.searchsorted(codebook.midpoints, z, side="left").astype(np.uint8)


@dataclass(frozen=True)
class QuantizedValueBlock:
    """One layer's quantized V tensor.

    ``codes`` holds one uint8 index per coordinate; ``scales`` holds one
    f32 RMS per head vector, laid out ``[batch, kv_heads, seq_len]``.
    A zero scale marks a zero vector and forces zero codes for it.
    """

    geometry: ModelGeometry
    codebook_name: str
    bits: int
    codes: np.ndarray
    scales: np.ndarray
    sign_seed: int | None = None

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes)
        scales = np.ascontiguousarray(self.scales)
        if codes.dtype != np.uint8:
            raise CorruptBlockError(f"value codes must be uint8, got {codes.dtype}")
        if codes.shape != self.geometry.tensor_shape:
            raise GeometryError(
                f"value codes shape {codes.shape} does not match geometry "
                f"{self.geometry.tensor_shape}"
            )
        if codes.size and int(codes.max()) >= (1 << self.bits):
            raise CorruptBlockError(
                f"corrupt block: code {int(codes.max())} out of range for "
                f"{self.bits}-bit codebook"
            )
        expected_scales = self.geometry.tensor_shape[:-1]
        if scales.dtype != np.float32 or scales.shape != expected_scales:
            raise CorruptBlockError(
                f"scales must be float32 with shape {expected_scales}, got "
                f"{scales.dtype} {scales.shape}"
            )
        if not np.isfinite(scales).all() or (scales < 0).any():
            raise CorruptBlockError("scales must be finite and >= 0")
        if codes[scales == 0.0].any():
            raise CorruptBlockError("zero-scale vector with nonzero codes")
        codes.flags.writeable = False
        scales.flags.writeable = False
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "scales", scales)

    @property
    def payload_nbytes(self) -> int:
        """Physical bytes as held in memory: one byte per code plus f32 scales."""
        return self.codes.nbytes + self.scales.nbytes

    @property
    def packed_payload_nbytes(self) -> int:
        """Physical bytes with codes packed 8-per-3-bytes (3-bit books only)."""
        if self.bits != 3:
            return self.payload_nbytes
        return 3 * ((self.codes.size + 7) // 8) + self.scales.nbytes


def sign_diagonal(seed: int, head_dim: int) -> np.ndarray:
    """Deterministic +/-1 diagonal for optional pre-rotation sign flips.

    Data-oblivious: depends only on the seed and dimension, so encoder
    and decoder derive the same diagonal without storing it.
    """
    rng = np.random.default_rng(seed)
    return (rng.integers(0, 2, size=head_dim) * 2 - 1).astype(np.float64)


def quantize_v(
    tensor: KvTensor,
    codebook: Codebook = GAUSSIAN_3BIT,
    sign_seed: int | None = None,
) -> QuantizedValueBlock:
    """Rotate, RMS-normalize, and code one layer's V tensor.

    Normalization is per head vector: rms = ||v|| / sqrt(d), stored as
    f32. Zero vectors get scale 0 and code 0 everywhere.
    """
    vals = tensor.values.astype(np.float64)
    if sign_seed is not None:
        vals = vals * sign_diagonal(sign_seed, tensor.geometry.head_dim)
    rot = rotate_forward(vals)
    rms = np.sqrt(np.mean(np.square(rot), axis=-1))
    scales = rms.astype(np.float32)
    z = rot / np.where(rms > 0.0, rms, 1.0)[..., None]
    codes = encode_coordinates(z, codebook)
    codes[scales == 0.0] = 0
    return QuantizedValueBlock(
        geometry=tensor.geometry,
        codebook_name=codebook.name,
        bits=codebook.bits,
        codes=codes,
        scales=scales,
        sign_seed=sign_seed,
    )


def dequantize_v(
    block: QuantizedValueBlock,
    codebook: Codebook = GAUSSIAN_3BIT,
) -> KvTensor:
    """Reconstruct V: centroid lookup, rescale by stored RMS, rotate back."""
    if codebook.name != block.codebook_name or codebook.bits != block.bits:
        raise CorruptBlockError(
            f"block was coded with {block.codebook_name!r} at {block.bits} bits, "
            f"got {codebook.name!r} at {codebook.bits} bits"
        )
    table = codebook.centroids.astype(np.float32)
    y = table[block.codes]
    y *= block.scales[..., None]
    out = rotate_inverse(y)
    if block.sign_seed is not None:
        out *= sign_diagonal(block.sign_seed, block.geometry.head_dim).astype(np.float32)
    return KvTensor(block.geometry, out)


def lloyd_max_train(
    samples: np.ndarray,
    bits: int,
    max_iters: int = 200,
    tol: float = 1e-7,
) -> Codebook:
    """Train a scalar Lloyd-Max codebook on 1-D samples.

    Alternates centroid updates (cell means) with boundary updates
    (midpoints), starting from evenly spaced sample quantiles. An empty
    cell is repaired by reseeding its centroid inside the most populated
    cell; repairs are reported as a RuntimeWarning with a count. On
    degenerate (near-constant) input the centroids collapse toward the
    constant while staying strictly increasing.
    """
    data = np.asarray(samples, dtype=np.float64).ravel()
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must be in [1, 8], got {bits}")
    levels = 1 << bits
    if data.size < 10 * levels:
        raise ValueError(
            f"need at least {10 * levels} samples for {bits} bits, got {data.size}"
        )
    if not np.isfinite(data).all():
        raise ValueError("samples must be finite")

    lo, hi = float(data.min()), float(data.max())
    quantiles = (np.arange(levels) + 0.5) / levels
    centroids = _strictly_increasing(np.quantile(data, quantiles))
    repairs = 0
    for _ in range(max_iters):
        mids = (centroids[:-1] + centroids[1:]) / 2.0
        cells = np.searchsorted(mids, data, side="left")
        counts = np.bincount(cells, minlength=levels)
        sums = np.bincount(cells, weights=data, minlength=levels)
        new = centroids.copy()
        occupied = counts > 0
        new[occupied] = sums[occupied] / counts[occupied]
        empty = np.flatnonzero(~occupied)
        if empty.size:
            repairs += int(empty.size)
            crowded = int(np.argmax(counts))
            cell_lo = mids[crowded - 1] if crowded > 0 else lo
            cell_hi = mids[crowded] if crowded < levels - 1 else hi
            for j, cell in enumerate(empty):
                # spread reseeds inside the crowded cell so they stay distinct
                frac = (j + 1) / (empty.size + 1)
                new[cell] = cell_lo + frac * (cell_hi - cell_lo)
            centroids = _strictly_increasing(np.sort(new))
            continue
        new = _strictly_increasing(new)
        shift = float(np.max(np.abs(new - centroids)))
        centroids = new
        if shift < tol:
            break
    if repairs:
        warnings.warn(
            f"lloyd_max_train repaired {repairs} empty cell(s)", RuntimeWarning
        )
    return Codebook(bits=bits, centroids=centroids, name=f"lloyd-max-{bits}bit-trained")


def _strictly_increasing(arr: np.ndarray) -> np.ndarray:
    """Nudge duplicate entries up by ULPs so the sequence strictly increases."""
    out = arr.copy()
    for i in range(1, out.size):
        if out[i] <= out[i - 1]:
            out[i] = np.nextafter(out[i - 1], np.inf)
    return out


def pack_indices_3bit(codes: np.ndarray) -> bytes:
    """Pack 3-bit codes 8-per-3-bytes, little-endian bit order within each group."""
    flat = np.ascontiguousarray(codes, dtype=np.uint8).ravel()
    if flat.size and int(flat.max()) > 7:
        raise ValueError("3-bit packing needs codes in [0, 7]")
    pad = (-flat.size) % 8
    if pad:
        flat = np.concatenate([flat, np.zeros(pad, dtype=np.uint8)])
    groups = flat.reshape(-1, 8).astype(np.uint32)
    words = np.zeros(groups.shape[0], dtype=np.uint32)
    for i in range(8):
        words |= groups[:, i] << np.uint32(3 * i)
    out = np.empty((words.size, 3), dtype=np.uint8)
    out[:, 0] = words & 0xFF
    out[:, 1] = (words >> np.uint32(8)) & 0xFF
    out[:, 2] = (words >> np.uint32(16)) & 0xFF
    return out.tobytes()


def unpack_indices_3bit(packed: bytes, count: int) -> np.ndarray:
    """Inverse of :func:`pack_indices_3bit`; returns ``count`` uint8 codes."""
    raw = np.frombuffer(packed, dtype=np.uint8)
    if raw.size != 3 * ((count + 7) // 8):
        raise ValueError(
            f"packed length {raw.size} does not fit {count} 3-bit codes"
        )
    if count == 0:
        return np.zeros(0, dtype=np.uint8)
    triplets = raw.reshape(-1, 3).astype(np.uint32)
    words = triplets[:, 0] | (triplets[:, 1] << np.uint32(8)) | (triplets[:, 2] << np.uint32(16))
    codes = np.empty((words.size, 8), dtype=np.uint8)
    for i in range(8):
        codes[:, i] = (words >> np.uint32(3 * i)) & 0x7
    return codes.ravel()[:count].copy()
