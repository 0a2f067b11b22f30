"""Adapters between HuggingFace cache objects and plain per-layer tensor lists.

Everything downstream of a prefill works on ``list[(K, V)]`` float32 CPU
tensors; these helpers peel that list out of whatever cache class the
installed transformers version returns and rebuild a fresh injectable cache
from it.
"""

from __future__ import annotations

from typing import Sequence

import torch
from transformers import DynamicCache


class CacheLayoutError(TypeError):
    """The model returned a past_key_values layout this bridge cannot read."""


def _normalize(k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if k.dim() != 4 or v.dim() != 4:
        raise CacheLayoutError(
            f"expected 4-D [batch, heads, seq, dim] cache tensors, got {tuple(k.shape)}"
        )
    return (
        k.detach().to("cpu", torch.float32).contiguous(),
        v.detach().to("cpu", torch.float32).contiguous(),
    )


def cache_layers(past_key_values) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Extract per-layer (K, V) float32 CPU tensors from a prefill cache.

    Handles the layered cache objects of transformers 5 (``cache.layers``),
    the paired-list layout of transformers 4 (``key_cache``/``value_cache``),
    and legacy tuple-of-pairs caches.
    """
    if past_key_values is None:
        raise CacheLayoutError("model returned no past_key_values; call with use_cache=True")
    if hasattr(past_key_values, "layers"):
        return [_normalize(layer.keys, layer.values) for layer in past_key_values.layers]
    if hasattr(past_key_values, "key_cache") and hasattr(past_key_values, "value_cache"):
        return [
            _normalize(k, v)
            for k, v in zip(past_key_values.key_cache, past_key_values.value_cache)
        ]
    if isinstance(past_key_values, (tuple, list)):
        out = []
        for entry in past_key_values:
            if not (isinstance(entry, (tuple, list)) and len(entry) == 2):
                raise CacheLayoutError(f"unsupported legacy cache entry {type(entry).__name__}")
            out.append(_normalize(entry[0], entry[1]))
        return out
    raise CacheLayoutError(f"unsupported cache layout {type(past_key_values).__name__}")


def build_cache(layers: Sequence[tuple[torch.Tensor, torch.Tensor]]) -> DynamicCache:
    """Assemble a fresh DynamicCache from per-layer tensors.

    Tensors are cloned: forward passes append to the returned cache in place,
    and the caller's copies must stay pristine for reuse.
    """
    cache = DynamicCache()
    for idx, (k, v) in enumerate(layers):
        cache.update(k.clone(), v.clone(), idx)
    return cache


def model_kv_geometry(model) -> dict:
    """KV-cache shape the model will produce, read off its config (GQA aware)."""
    cfg = model.config
    attn_heads = cfg.num_attention_heads
    kv_heads = getattr(cfg, "num_key_value_heads", None) or attn_heads
    head_dim = getattr(cfg, "head_dim", None) or cfg.hidden_size // attn_heads
    return {
        "num_layers": cfg.num_hidden_layers,
        "kv_heads": int(kv_heads),
        "head_dim": int(head_dim),
    }
