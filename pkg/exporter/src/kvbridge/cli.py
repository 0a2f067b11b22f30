"""Command line for the bridge: dump a model's KV cache, run the eval loop."""

from __future__ import annotations

import argparse
import json
import shlex
import sys
from pathlib import Path

from .dumpfile import DumpFormatError
from .evaluator import ExperimentSpec, inject_and_eval
from .exporter import export_kv
from .hfcache import CacheLayoutError
from .pooltool import DEFAULT_KVPOOL, PoolToolError


def _load_model(path: str):
    # imported lazily so --help stays fast and error-free without weights
    from transformers import AutoModelForCausalLM, AutoTokenizer

    model = AutoModelForCausalLM.from_pretrained(path).eval()
    tokenizer = AutoTokenizer.from_pretrained(path)
    return model, tokenizer


def _read_context(args) -> str:
    if args.context is not None:
        return args.context
    return Path(args.context_file).read_text()


def _int_list(text: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from exc
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"need positive integers, got {text!r}")
    return values


def cmd_export(args) -> int:
    model, tokenizer = _load_model(args.model)
    ids = tokenizer(_read_context(args), return_tensors="pt")["input_ids"]
    info = export_kv(model, ids, args.output, baseline_bits=args.baseline_bits)
    g = info.geometry
    print(
        f"wrote {args.output}: {g.num_layers} layers, {g.kv_heads} KV heads, "
        f"{g.seq_len} tokens, head_dim {g.head_dim}, {info.model_dtype} model"
    )
    return 0


def cmd_run(args) -> int:
    model, tokenizer = _load_model(args.model)
    spec = ExperimentSpec(
        model_id=args.model,
        context=_read_context(args),
        queries=tuple(args.query),
        max_new_tokens=args.max_new_tokens,
        tail_fraction=args.tail_fraction,
    )
    report = inject_and_eval(
        model,
        tokenizer,
        spec,
        args.workdir,
        agent_counts=tuple(args.agents),
        packed=args.packed,
        decode_bits=args.decode_bits,
        kvpool_cmd=tuple(shlex.split(args.kvpool)),
        report_path=args.report,
    )
    print(
        f"baseline ppl {report['baseline_ppl']:.6f}  "
        f"compressed ppl {report['compressed_ppl']:.6f}  "
        f"delta {report['delta_percent']:+.2f}%  "
        f"agents {report['agent_counts']}  "
        f"invariant {report['agent_invariant']}"
    )
    if args.report:
        print(f"report written to {args.report}")
    else:
        print(json.dumps(report, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvbridge",
        description="Bridge HuggingFace KV caches to the shared-pool compression tool.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="prefill a model and dump its KV cache")
    p.add_argument("--model", required=True, help="local model directory")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--context", help="context text on the command line")
    src.add_argument("--context-file", help="file with the context text")
    p.add_argument("--output", required=True, help="PKVD file to write")
    p.add_argument(
        "--baseline-bits",
        type=int,
        default=None,
        choices=(16, 32),
        help="override the per-element baseline recorded in the dump",
    )
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("run", help="full loop: export, compress, inject, score")
    p.add_argument("--model", required=True, help="local model directory")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--context", help="context text on the command line")
    src.add_argument("--context-file", help="file with the context text")
    p.add_argument(
        "--query",
        action="append",
        required=True,
        help="agent query; repeat for several agents' prompts",
    )
    p.add_argument("--workdir", required=True, help="directory for dump and pool files")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--agents", type=_int_list, default=[3, 5], help="agent counts, e.g. 3,5")
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.add_argument("--tail-fraction", type=float, default=0.30)
    p.add_argument("--packed", action="store_true", help="pack value codes to 3 bits")
    p.add_argument("--decode-bits", type=int, default=16, choices=(16, 32))
    p.add_argument(
        "--kvpool",
        default=" ".join(DEFAULT_KVPOOL),
        help="pool tool command (shell-split), default 'kvpool'",
    )
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DumpFormatError, CacheLayoutError, PoolToolError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
