"""Prefill export: geometry fidelity, GQA awareness, and input validation."""

import pytest
import torch

from kvbridge.dumpfile import read_dump
from kvbridge.exporter import default_baseline_bits, export_kv
from kvbridge.hfcache import (
    CacheLayoutError,
    build_cache,
    cache_layers,
    model_kv_geometry,
)


class TestExportKv:
    def test_dump_matches_a_manual_prefill_bit_for_bit(self, model, tokenizer, tmp_path):
        ids = tokenizer("The pool is sealed before the first attach.", return_tensors="pt")[
            "input_ids"
        ]
        info = export_kv(model, ids, tmp_path / "cache.pkvd")
        with torch.no_grad():
            out = model(ids, use_cache=True)
        want = cache_layers(out.past_key_values)
        _, got = read_dump(info.path)
        assert len(got) == len(want)
        for (wk, wv), (gk, gv) in zip(want, got):
            assert torch.equal(wk, gk)
            assert torch.equal(wv, gv)

    def test_geometry_records_kv_heads_not_attention_heads(self, model, tmp_path):
        ids = torch.randint(0, 256, (1, 12), generator=torch.Generator().manual_seed(0))
        info = export_kv(model, ids, tmp_path / "cache.pkvd")
        assert model.config.num_attention_heads == 8
        assert info.geometry.kv_heads == model.config.num_key_value_heads == 4
        assert info.geometry.num_layers == model.config.num_hidden_layers
        assert info.geometry.head_dim == 16
        assert info.geometry.seq_len == info.prefill_tokens == 12
        assert model_kv_geometry(model) == {"num_layers": 4, "kv_heads": 4, "head_dim": 16}

    def test_float32_model_defaults_to_32_bit_baseline(self, model, tmp_path):
        ids = torch.arange(8).reshape(1, 8)
        info = export_kv(model, ids, tmp_path / "cache.pkvd")
        assert default_baseline_bits(model) == 32
        assert info.geometry.baseline_bits == 32
        override = export_kv(model, ids, tmp_path / "cache16.pkvd", baseline_bits=16)
        assert override.geometry.baseline_bits == 16

    def test_rejects_contexts_shorter_than_two_tokens(self, model, tmp_path):
        with pytest.raises(ValueError, match="at least 2 tokens"):
            export_kv(model, torch.tensor([[5]]), tmp_path / "x.pkvd")
        with pytest.raises(ValueError, match="at least 2 tokens"):
            export_kv(model, torch.zeros((1, 0), dtype=torch.long), tmp_path / "x.pkvd")

    def test_accepts_1d_input_ids(self, model, tmp_path):
        info = export_kv(model, torch.arange(6), tmp_path / "cache.pkvd")
        assert info.geometry.batch == 1
        assert info.geometry.seq_len == 6


class TestCacheAdapters:
    def test_layered_cache_and_legacy_tuples_agree(self, model):
        ids = torch.arange(10).reshape(1, 10)
        with torch.no_grad():
            out = model(ids, use_cache=True)
        layered = cache_layers(out.past_key_values)
        legacy = cache_layers([(k, v) for k, v in layered])
        for (a, b), (c, d) in zip(layered, legacy):
            assert torch.equal(a, c)
            assert torch.equal(b, d)

    def test_unsupported_layouts_are_rejected(self):
        with pytest.raises(CacheLayoutError, match="no past_key_values"):
            cache_layers(None)
        with pytest.raises(CacheLayoutError, match="unsupported cache layout"):
            cache_layers("not a cache")
        with pytest.raises(CacheLayoutError, match="legacy cache entry"):
            cache_layers([(torch.zeros(1, 1, 1, 2),)])
        with pytest.raises(CacheLayoutError, match="4-D"):
            cache_layers([(torch.zeros(3), torch.zeros(3))])

    def test_build_cache_clones_its_inputs(self, model):
        ids = torch.arange(10).reshape(1, 10)
        with torch.no_grad():
            out = model(ids, use_cache=True)
        layers = cache_layers(out.past_key_values)
        snapshot = [(k.clone(), v.clone()) for k, v in layers]
        cache = build_cache(layers)
        layers[0][0].zero_()  # caller scribbles on its copy after injection
        got = cache_layers(cache)
        assert torch.equal(got[0][0], snapshot[0][0])
        assert not torch.equal(got[0][0], layers[0][0])
