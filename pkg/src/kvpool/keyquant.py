"""Symmetric per-tensor int8 quantization for key tensors (q8_0 style).

One float32 scale per layer tensor: s = max|K| / 127. Codes are
round-half-away-from-zero of K/s, clipped to [-128, 127]. The absolute
reconstruction error is bounded by s/2 for every element, which is what
keeps dot products against rotated queries honest. An all-zero tensor
gets scale 0 and all-zero codes by convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CorruptBlockError, GeometryError
from .model import KvTensor, ModelGeometry

INT8_LEVELS = 127


@dataclass(frozen=True)
class QuantizedKeyBlock:
    """One layer's quantized K tensor: int8 codes plus a single f32 scale."""

    geometry: ModelGeometry
    scale: float
    codes: np.ndarray

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes)
        if codes.dtype != np.int8:
            raise CorruptBlockError(f"key codes must be int8, got {codes.dtype}")
        if codes.shape != self.geometry.tensor_shape:
            raise GeometryError(
                f"key codes shape {codes.shape} does not match geometry "
                f"{self.geometry.tensor_shape}"
            )
        if not (np.isfinite(self.scale) and self.scale >= 0.0):
            raise CorruptBlockError(f"key scale must be finite and >= 0, got {self.scale}")
        if self.scale == 0.0 and codes.any():
            raise CorruptBlockError("zero scale with nonzero codes")
        codes.flags.writeable = False
        object.__setattr__(self, "codes", codes)

    @property
    def payload_nbytes(self) -> int:
        """Physical bytes: one byte per element plus the f32 scale."""
        return self.codes.nbytes + 4


def quantize_k(tensor: KvTensor) -> QuantizedKeyBlock:
    """Quantize one layer's K tensor to int8 with a shared f32 scale."""
    values = tensor.values
    peak = float(np.max(np.abs(values)))
    if peak == 0.0:
        return QuantizedKeyBlock(
            tensor.geometry, 0.0, np.zeros(values.shape, dtype=np.int8)
        )
    scale = float(np.float32(peak / INT8_LEVELS))
    q = values.astype(np.float64) / scale
    # round half away from zero, not banker's rounding
    q = np.floor(np.abs(q) + 0.5) * np.sign(q)
    np.clip(q, -128, 127, out=q)
    return QuantizedKeyBlock(tensor.geometry, scale, q.astype(np.int8))


def dequantize_k(block: QuantizedKeyBlock) -> KvTensor:
    """Reconstruct K as codes * scale in float32."""
    values = block.codes.astype(np.float32) * np.float32(block.scale)
    return KvTensor(block.geometry, values)
