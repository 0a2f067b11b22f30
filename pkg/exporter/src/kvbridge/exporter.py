"""Prefill a causal LM and write its KV cache as a PKVD dump."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .dumpfile import DumpGeometry, write_dump
from .hfcache import cache_layers


@dataclass(frozen=True)
class ExportInfo:
    path: Path
    geometry: DumpGeometry
    prefill_tokens: int
    model_dtype: str


def default_baseline_bits(model) -> int:
    """16 for half-precision weights, 32 for float32: the serving footprint."""
    dtype = next(model.parameters()).dtype
    return 16 if dtype in (torch.float16, torch.bfloat16) else 32


def export_kv(
    model,
    input_ids: torch.Tensor,
    path: str | Path,
    baseline_bits: int | None = None,
) -> ExportInfo:
    """Run one forward prefill over ``input_ids`` and dump every layer's K/V.

    ``input_ids`` is ``[T]`` or ``[batch, T]`` with T >= 2; the dump's kv_heads
    field comes from the cache tensors themselves, so grouped-query models
    record their KV-head count, not the attention-head count. Returns the
    written geometry and prefill length.
    """
    ids = torch.atleast_2d(torch.as_tensor(input_ids))
    if ids.dim() != 2:
        raise ValueError(f"input_ids must be 1-D or 2-D, got shape {tuple(ids.shape)}")
    if ids.shape[1] < 2:
        raise ValueError(f"context must be at least 2 tokens, got {ids.shape[1]}")
    with torch.no_grad():
        out = model(ids, use_cache=True)
    layers = cache_layers(out.past_key_values)
    if baseline_bits is None:
        baseline_bits = default_baseline_bits(model)
    geometry = write_dump(path, layers, baseline_bits=baseline_bits)
    return ExportInfo(
        path=Path(path),
        geometry=geometry,
        prefill_tokens=int(ids.shape[1]),
        model_dtype=str(next(model.parameters()).dtype).removeprefix("torch."),
    )
