"""Teacher-forced perplexity and generation probes for injected KV caches.

The protocol: tokenize a context, prefill a cache over its leading
(1 - tail_fraction), and score the remaining tail by teacher forcing
conditioned on that cache. Swapping the prefill cache between the in-process
baseline and tensors reconstructed from dump files isolates exactly what
compression did to the model's view of the shared context. Generation probes
replay each agent query greedily against both cache variants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .dumpfile import read_dump
from .exporter import export_kv
from .hfcache import build_cache, cache_layers
from . import pooltool
from .pooltool import DEFAULT_KVPOOL


@dataclass(frozen=True)
class ExperimentSpec:
    """One shared-context experiment: a context, agent queries, and the split."""

    model_id: str
    context: str
    queries: tuple[str, ...] = field(default_factory=tuple)
    max_new_tokens: int = 16
    tail_fraction: float = 0.30

    def __post_init__(self) -> None:
        object.__setattr__(self, "queries", tuple(self.queries))
        if not self.context:
            raise ValueError("context must be non-empty")
        if len(self.queries) < 1:
            raise ValueError("need at least one agent query")
        if not 0.0 < self.tail_fraction <= 1.0:
            raise ValueError(f"tail_fraction must be in (0, 1], got {self.tail_fraction}")
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")


def split_point(n_tokens: int, tail_fraction: float) -> int:
    """Token index where the scored tail begins; everything before is cached.

    Clamped so the prefix keeps >= 2 tokens and the tail yields >= 1 scored
    target (position p feeds the first tail logit, which predicts p + 1).
    """
    if n_tokens < 4:
        raise ValueError(f"context too short to split, got {n_tokens} tokens")
    p = int(round(n_tokens * (1.0 - tail_fraction)))
    return min(max(p, 2), n_tokens - 2)


def _check_layers(model, layers, prefill_len: int, batch: int) -> None:
    want_layers = model.config.num_hidden_layers
    if len(layers) != want_layers:
        raise ValueError(f"cache has {len(layers)} layers, model has {want_layers}")
    b, _, t, _ = layers[0][0].shape
    if t != prefill_len:
        raise ValueError(f"cache covers {t} tokens, prefix is {prefill_len}")
    if b != batch:
        raise ValueError(f"cache batch {b} != input batch {batch}")


def teacher_forced_ppl(
    model,
    input_ids: torch.Tensor,
    prefill_len: int,
    layers: Sequence[tuple[torch.Tensor, torch.Tensor]],
) -> float:
    """exp(mean NLL) of ids[prefill_len+1:] given a cache injected for the prefix.

    The tail is fed in one forward pass with the rebuilt cache; log-likelihoods
    accumulate in float64 so equal logits give equal perplexities bit for bit.
    """
    ids = torch.atleast_2d(torch.as_tensor(input_ids))
    if prefill_len > ids.shape[1] - 2:
        raise ValueError(
            f"prefill {prefill_len} leaves no scored target in {ids.shape[1]} tokens"
        )
    _check_layers(model, layers, prefill_len, ids.shape[0])
    cache = build_cache(layers)
    with torch.no_grad():
        logits = model(ids[:, prefill_len:], past_key_values=cache).logits
    logp = torch.log_softmax(logits[:, :-1].double(), dim=-1)
    targets = ids[:, prefill_len + 1 :]
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return float(torch.exp(nll.mean()))


def ppl_delta_percent(baseline: float, compressed: float) -> float:
    """Relative perplexity change in percent, two decimals; negative improves."""
    if baseline <= 0:
        raise ValueError(f"baseline perplexity must be positive, got {baseline}")
    return round((compressed - baseline) / baseline * 100.0, 2)


def _pad_token_id(model) -> int:
    eos = model.config.eos_token_id
    if isinstance(eos, (list, tuple)):
        eos = eos[0] if eos else None
    return int(eos) if eos is not None else 0


def greedy_continuation(
    model,
    tokenizer,
    full_ids: torch.Tensor,
    layers: Sequence[tuple[torch.Tensor, torch.Tensor]],
    max_new_tokens: int,
) -> str:
    """Greedy-decode a continuation of ``full_ids`` with the cache injected
    for its leading ``layers``-covered prefix, returning only the new text."""
    ids = torch.atleast_2d(torch.as_tensor(full_ids))
    _check_layers(model, layers, layers[0][0].shape[2], ids.shape[0])
    cache = build_cache(layers)  # generate() appends to it; never reuse
    with torch.no_grad():
        out = model.generate(
            ids,
            past_key_values=cache,
            max_new_tokens=max_new_tokens,
            do_sample=False,
            pad_token_id=_pad_token_id(model),
        )
    return tokenizer.decode(out[0, ids.shape[1] :].tolist())


def inject_and_eval(
    model,
    tokenizer,
    spec: ExperimentSpec,
    workdir: str | Path,
    *,
    agent_counts: Sequence[int] = (3, 5),
    packed: bool = False,
    decode_bits: int = 16,
    kvpool_cmd: Sequence[str] = DEFAULT_KVPOOL,
    report_path: str | Path | None = None,
) -> dict:
    """Run the full bridge loop and return the report dict.

    export -> pool compress -> per-agent decompress -> inject -> score:

    * baseline perplexity from the in-process prefill cache,
    * the same cache re-read from the exported dump as a self-consistency
      gate (a float32 round trip must reproduce the baseline exactly),
    * compressed perplexity per simulated agent, every agent re-materializing
      its own tensors from the one shared pool snapshot,
    * greedy continuations of every query under both cache variants.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    enc = tokenizer(spec.context, return_tensors="pt")["input_ids"]
    total = int(enc.shape[1])
    prefix = split_point(total, spec.tail_fraction)

    with torch.no_grad():
        prefill = model(enc[:, :prefix], use_cache=True)
    base_layers = cache_layers(prefill.past_key_values)
    baseline_ppl = teacher_forced_ppl(model, enc, prefix, base_layers)

    dump_path = workdir / "context.pkvd"
    info = export_kv(model, enc[:, :prefix], dump_path)

    _, file_layers = read_dump(dump_path)
    uncompressed_ppl = teacher_forced_ppl(model, enc, prefix, file_layers)

    pool_path = workdir / "context.pkvp"
    pooltool.compress(dump_path, pool_path, packed=packed, kvpool_cmd=kvpool_cmd)

    query_ids = [tokenizer(q, return_tensors="pt")["input_ids"] for q in spec.queries]
    baseline_generations = [
        greedy_continuation(
            model,
            tokenizer,
            torch.cat([enc[:, :prefix], qi], dim=1),
            base_layers,
            spec.max_new_tokens,
        )
        for qi in query_ids
    ]

    evaluations = []
    for count in agent_counts:
        per_agent = []
        for agent in range(count):
            back_path = workdir / f"agents{count}_reader{agent}.pkvd"
            pooltool.decompress(
                pool_path, back_path, decode_bits=decode_bits, kvpool_cmd=kvpool_cmd
            )
            _, agent_layers = read_dump(back_path)
            agent_ppl = teacher_forced_ppl(model, enc, prefix, agent_layers)
            generations = []
            for q, qi, base_text in zip(spec.queries, query_ids, baseline_generations):
                compressed_text = greedy_continuation(
                    model,
                    tokenizer,
                    torch.cat([enc[:, :prefix], qi], dim=1),
                    agent_layers,
                    spec.max_new_tokens,
                )
                generations.append(
                    {"query": q, "baseline": base_text, "compressed": compressed_text}
                )
            per_agent.append({"agent": agent, "ppl": agent_ppl, "generations": generations})
        ppls = [entry["ppl"] for entry in per_agent]
        evaluations.append(
            {
                "agents": count,
                "per_agent_ppl": ppls,
                "compressed_ppl": ppls[0],
                "delta_percent": ppl_delta_percent(baseline_ppl, ppls[0]),
                "per_agent": per_agent,
            }
        )

    all_ppls = [p for ev in evaluations for p in ev["per_agent_ppl"]]
    report = {
        "model": spec.model_id,
        "tokenization": {
            "tokenizer": type(tokenizer).__name__,
            "vocab_size": int(getattr(tokenizer, "vocab_size", 0) or 0),
            "context_tokens": total,
            "prefill_tokens": prefix,
            "scored_tokens": total - prefix - 1,
            "tail_fraction": spec.tail_fraction,
        },
        "geometry": info.geometry.as_dict(),
        "files": {
            "dump": str(dump_path),
            "pool": str(pool_path),
            "packed": packed,
            "decode_bits": decode_bits,
        },
        "baseline_ppl": baseline_ppl,
        "uncompressed_injected_ppl": uncompressed_ppl,
        "uncompressed_delta_percent": ppl_delta_percent(baseline_ppl, uncompressed_ppl),
        "compressed_ppl": evaluations[0]["compressed_ppl"],
        "delta_percent": evaluations[0]["delta_percent"],
        "agent_counts": list(agent_counts),
        "evaluations": evaluations,
        "agent_invariant": len(set(all_ppls)) == 1,
    }
    if report_path is not None:
        Path(report_path).write_text(json.dumps(report, indent=2) + "\n")
    return report
