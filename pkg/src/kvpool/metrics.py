"""Compression accounting, memory projections, and fidelity reports.

Ratios come in two flavors. The logical ratio compares information
content: baseline_bits against the mean of key and value bits per
element (keys and values are the same element count, so the mean is
exact). The physical ratio divides actual baseline bytes by actual pool
bytes, which also pay for per-tensor key scales and per-vector value
scales, so it is slightly smaller.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import GeometryError
from .keyquant import dequantize_k
from .model import KvDump, ModelGeometry
from .pool import LayerStats, SharedPool
from .valuequant import DistortionBound, dequantize_v


def compression_ratio_exact(
    k_bits: int, v_bits: int, baseline_bits: int
) -> Fraction:
    """Logical compression ratio as an exact fraction.

    baseline / mean(k, v) = 2 * baseline / (k + v).
    """
    for name, b in (("k_bits", k_bits), ("v_bits", v_bits), ("baseline_bits", baseline_bits)):
        if not isinstance(b, int) or isinstance(b, bool) or b < 1:
            raise ValueError(f"{name} must be a positive int, got {b!r}")
    return Fraction(2 * baseline_bits, k_bits + v_bits)


def compression_ratio(k_bits: int, v_bits: int, baseline_bits: int) -> float:
    """Logical compression ratio as a float; 8-bit K, 3-bit V, bf16 gives 32/11."""
    return float(compression_ratio_exact(k_bits, v_bits, baseline_bits))


@dataclass(frozen=True)
class MemoryRow:
    """Aggregate cache memory for one (agents, tokens) point."""

    agents: int
    tokens: int
    baseline_bytes: int
    pool_bytes: float
    reduction_percent: float


def memory_table(
    geometry: ModelGeometry,
    agent_counts: Sequence[int],
    ratio: float,
    tokens: Sequence[int] | None = None,
) -> list[MemoryRow]:
    """Project aggregate memory: N private caches against one shared pool.

    Baseline is N agents each holding the full cache at baseline
    precision. The pool is one compressed copy, so its bytes do not
    scale with N: reduction = 100 * (1 - 1 / (N * ratio)).

    ``tokens`` overrides the context length per row; a single value
    broadcasts, a list must match ``agent_counts``.
    """
    if not agent_counts:
        raise ValueError("agent_counts must be non-empty")
    if any(n < 1 for n in agent_counts):
        raise ValueError(f"agent counts must be >= 1, got {list(agent_counts)}")
    if ratio <= 0:
        raise ValueError(f"ratio must be positive, got {ratio}")
    if tokens is None:
        token_list = [geometry.seq_len] * len(agent_counts)
    elif len(tokens) == 1:
        token_list = [tokens[0]] * len(agent_counts)
    elif len(tokens) == len(agent_counts):
        token_list = list(tokens)
    else:
        raise ValueError(
            f"tokens must broadcast to agent_counts: {len(tokens)} vs {len(agent_counts)}"
        )
    if any(t < 1 for t in token_list):
        raise ValueError(f"token counts must be >= 1, got {token_list}")

    rows = []
    for n, t in zip(agent_counts, token_list):
        per_agent = geometry.with_seq_len(t).baseline_cache_nbytes()
        baseline = n * per_agent
        pool = per_agent / ratio
        rows.append(
            MemoryRow(
                agents=n,
                tokens=t,
                baseline_bytes=baseline,
                pool_bytes=pool,
                reduction_percent=100.0 * (1.0 - pool / baseline),
            )
        )
    return rows


def format_memory_table(rows: Iterable[MemoryRow]) -> str:
    """Fixed-width text table, bytes shown in decimal GB."""
    header = f"{'agents':>6}  {'tokens':>8}  {'baseline GB':>12}  {'pool GB':>10}  {'reduction %':>11}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.agents:>6}  {r.tokens:>8}  {r.baseline_bytes / 1e9:>12.3f}  "
            f"{r.pool_bytes / 1e9:>10.3f}  {r.reduction_percent:>11.1f}"
        )
    return "\n".join(lines)


def memory_rows_csv(rows: Iterable[MemoryRow]) -> str:
    lines = ["agents,tokens,baseline_bytes,pool_bytes,reduction_percent"]
    for r in rows:
        lines.append(
            f"{r.agents},{r.tokens},{r.baseline_bytes},{r.pool_bytes:.1f},"
            f"{r.reduction_percent:.4f}"
        )
    return "\n".join(lines)


@dataclass(frozen=True)
class PplDelta:
    """Relative perplexity change of a compressed cache against baseline."""

    baseline_ppl: float
    compressed_ppl: float
    delta_percent: float


def ppl_delta(baseline_ppl: float, compressed_ppl: float) -> PplDelta:
    """Percent change: 100 * (compressed - baseline) / baseline."""
    if not baseline_ppl > 0:
        raise ValueError(f"baseline perplexity must be positive, got {baseline_ppl}")
    if not compressed_ppl > 0:
        raise ValueError(f"compressed perplexity must be positive, got {compressed_ppl}")
    delta = 100.0 * (compressed_ppl - baseline_ppl) / baseline_ppl
    return PplDelta(baseline_ppl, compressed_ppl, delta)


@dataclass(frozen=True)
class CompressionReport:
    """End-to-end fidelity and size report for one dump/pool pair."""

    k_bits: int
    v_bits: int
    baseline_bits: int
    logical_ratio: float
    physical_ratio: float
    packed_ratio: float
    logical_payload_bytes: float
    physical_payload_bytes: int
    packed_payload_bytes: int
    baseline_bytes: int
    v_bound: float
    layer_stats: tuple[LayerStats, ...]
    v_bound_violations: tuple[int, ...]


def distortion_report(dump: KvDump, pool: SharedPool) -> CompressionReport:
    """Measure per-layer reconstruction error of a pool against its source dump.

    Value error is normalized per layer (MSE over mean square of the
    original); layers whose normalized error exceeds the 3-bit Gaussian
    ceiling are flagged. Key error is reported as MSE and max absolute
    error; the max is bounded by scale/2 for any input.
    """
    if dump.geometry != pool.geometry:
        raise GeometryError(
            f"dump geometry {dump.geometry} does not match pool geometry {pool.geometry}"
        )
    v_bits = pool.layer_blocks(0)[1].bits
    bound = DistortionBound(v_bits).bound
    stats = []
    violations = []
    for idx, (k, v) in enumerate(dump.layers):
        kq, vq = pool.layer_blocks(idx)
        k_err = dequantize_k(kq).values.astype(np.float64) - k.values
        v_ref = v.values.astype(np.float64)
        v_err = dequantize_v(vq, pool.codebook).values.astype(np.float64) - v_ref
        v_power = float(np.mean(np.square(v_ref)))
        v_mse = float(np.mean(np.square(v_err)))
        v_nmse = v_mse / v_power if v_power > 0.0 else 0.0
        stats.append(
            LayerStats(
                layer=idx,
                k_scale=kq.scale,
                k_mse=float(np.mean(np.square(k_err))),
                k_max_err=float(np.max(np.abs(k_err))),
                v_mse=v_mse,
                v_nmse=v_nmse,
            )
        )
        if v_nmse > bound:
            violations.append(idx)

    g = dump.geometry
    logical_ratio = compression_ratio(8, v_bits, g.baseline_bits)
    baseline = g.baseline_cache_nbytes()
    physical = pool.payload_nbytes()
    packed = pool.packed_payload_nbytes()
    return CompressionReport(
        k_bits=8,
        v_bits=v_bits,
        baseline_bits=g.baseline_bits,
        logical_ratio=logical_ratio,
        physical_ratio=baseline / physical,
        packed_ratio=baseline / packed,
        logical_payload_bytes=pool.logical_payload_bits() / 8,
        physical_payload_bytes=physical,
        packed_payload_bytes=packed,
        baseline_bytes=baseline,
        v_bound=bound,
        layer_stats=tuple(stats),
        v_bound_violations=tuple(violations),
    )
