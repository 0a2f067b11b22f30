"""Shared fixtures: a deterministic sub-1M-parameter GQA model built offline.

The hub is unreachable in CI, so the "real model" is a randomly initialized
4-layer Llama with grouped-query attention (8 query heads over 4 KV heads,
head_dim 16) and a byte-level tokenizer whose vocab is exactly the 256 byte
alphabet. Random weights are fine here: every property under test is an
identity of the cache plumbing, not of language modeling quality.
"""

from __future__ import annotations

import shutil

import pytest
import torch
from tokenizers import Tokenizer
from tokenizers.decoders import ByteLevel as ByteLevelDecoder
from tokenizers.models import BPE
from tokenizers.pre_tokenizers import ByteLevel
from transformers import LlamaConfig, LlamaForCausalLM, PreTrainedTokenizerFast

CONTEXT = (
    "Shared context note, revision 4. The deployment runs fifteen agents against "
    "one prefilled transcript: a planner, four retrievers, eight workers, and two "
    "critics. Every agent reads the same 1837-token board briefing, so the key and "
    "value tensors for that prefix are computed once, compressed once, and mapped "
    "read-only into each decoder. Keys keep eight bits with one scale per tensor; "
    "values are rotated and stored as three-bit codebook indices. Readers never "
    "write: the pool is sealed before the first attach, and every view decodes "
    "the same bytes to the same bfloat16 tensors regardless of how many peers "
    "are attached or in what order they arrive. "
) * 2


def _byte_tokenizer() -> PreTrainedTokenizerFast:
    # byte-level BPE with zero merges: the vocab is exactly the byte alphabet,
    # so any text tokenizes losslessly and ids stay below vocab_size=256
    alphabet = ByteLevel.alphabet()
    vocab = {ch: i for i, ch in enumerate(sorted(alphabet))}
    tok = Tokenizer(BPE(vocab=vocab, merges=[]))
    tok.pre_tokenizer = ByteLevel(add_prefix_space=False)
    tok.decoder = ByteLevelDecoder()
    return PreTrainedTokenizerFast(tokenizer_object=tok)


@pytest.fixture(scope="session")
def context_text() -> str:
    return CONTEXT


@pytest.fixture(scope="session")
def tokenizer() -> PreTrainedTokenizerFast:
    return _byte_tokenizer()


@pytest.fixture(scope="session")
def model() -> LlamaForCausalLM:
    config = LlamaConfig(
        vocab_size=256,
        hidden_size=128,
        intermediate_size=256,
        num_hidden_layers=4,
        num_attention_heads=8,
        num_key_value_heads=4,
        max_position_embeddings=2048,
        tie_word_embeddings=True,
    )
    torch.manual_seed(1234)
    return LlamaForCausalLM(config).eval()


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory, model, tokenizer) -> str:
    path = tmp_path_factory.mktemp("tiny-model")
    model.save_pretrained(path)
    tokenizer.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session", autouse=True)
def _require_pool_tool():
    if shutil.which("kvpool") is None:
        pytest.skip("kvpool executable not on PATH; install the pool package first")
