"""Command-line front end.

Subcommands:

* ``synth``      draw a synthetic Gaussian dump and write it as PKVD
* ``compress``   dump -> pool snapshot (PKVP), with a size/fidelity report
* ``decompress`` pool snapshot -> reconstructed dump (PKVD)
* ``verify``     cross-reader equality, fidelity bounds, pool-size invariance
* ``simulate``   memory projection table for agent counts
* ``bench``      build/decode timings and reader throughput
* ``lloyd``      train a codebook on synthetic Gaussian samples

Exit codes: 0 success, 1 verification failure, 2 bad usage or malformed
input.
"""

from __future__ import annotations

import argparse
import sys
import threading
from fractions import Fraction

import numpy as np

from .bench import run_bench
from .checksum import fnv1a64
from .errors import DumpFormatError, GeometryError, KvPoolError
from .keyquant import dequantize_k
from .metrics import (
    compression_ratio,
    compression_ratio_exact,
    distortion_report,
    format_memory_table,
    memory_rows_csv,
    memory_table,
)
from .model import ModelGeometry, read_dump, synth_gaussian_dump, write_dump, KvDump
from .pool import build_pool, load_pool, save_pool
from .valuequant import GAUSSIAN_3BIT, dequantize_v, lloyd_max_train

K_BITS = 8


def _parse_int_list(text: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _add_geometry_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int, default=32, help="transformer layers")
    p.add_argument("--kv-heads", type=int, default=8, help="KV heads per layer")
    p.add_argument("--head-dim", type=int, default=128, help="head dimension (power of two)")
    p.add_argument("--seq-len", type=int, default=1024, help="cached tokens")
    p.add_argument("--batch", type=int, default=1, help="batch size")
    p.add_argument(
        "--baseline-bits", type=int, default=16, choices=(16, 32),
        help="precision of the uncompressed baseline",
    )


def _geometry_from_args(args: argparse.Namespace) -> ModelGeometry:
    return ModelGeometry(
        num_layers=args.layers,
        kv_heads=args.kv_heads,
        head_dim=args.head_dim,
        seq_len=args.seq_len,
        batch=args.batch,
        baseline_bits=args.baseline_bits,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvpool",
        description="Asymmetric KV-cache compression with a shared read-only pool.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic Gaussian dump")
    p.add_argument("--output", required=True, help="PKVD file to write")
    _add_geometry_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--variance", type=float, default=None,
        help="entry variance (default 1/head_dim)",
    )
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compress", help="compress a dump into a pool snapshot")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="PKVD dump to compress")
    src.add_argument(
        "--synth", action="store_true",
        help="compress a synthetic dump drawn from the geometry flags",
    )
    p.add_argument("--output", required=True, help="PKVP file to write")
    _add_geometry_args(p)
    p.add_argument("--seed", type=int, default=0, help="seed for --synth")
    p.add_argument("--packed", action="store_true", help="pack value codes to 3 bits")
    p.add_argument(
        "--sign-diagonal", type=int, nargs="?", const=0, default=None, metavar="SEED",
        help="flip coordinate signs with a seeded diagonal before rotating",
    )
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="reconstruct a dump from a pool snapshot")
    p.add_argument("--input", required=True, help="PKVP file to read")
    p.add_argument("--output", required=True, help="PKVD file to write")
    p.add_argument("--decode-bits", type=int, default=16, choices=(16, 32))
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("verify", help="check a pool snapshot against its source dump")
    p.add_argument("--input", required=True, help="PKVD dump the pool was built from")
    p.add_argument("--pool", required=True, help="PKVP snapshot to verify")
    p.add_argument(
        "--agents", type=_parse_int_list, default=[3, 5, 10, 15],
        help="comma-separated reader counts (max is used for the concurrency check)",
    )
    p.add_argument("--decode-bits", type=int, default=16, choices=(16, 32))
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", help="project aggregate memory for agent counts")
    _add_geometry_args(p)
    p.add_argument(
        "--agents", type=_parse_int_list, default=[3, 5, 10, 15],
        help="comma-separated agent counts",
    )
    p.add_argument(
        "--tokens", type=_parse_int_list, default=None,
        help="context length per row (single value broadcasts)",
    )
    p.add_argument("--csv", action="store_true", help="emit CSV instead of a table")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="time pool build and reader throughput")
    _add_geometry_args(p)
    p.add_argument("--agents", type=_parse_int_list, default=[1])
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--decode-bits", type=int, default=16, choices=(16, 32))
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("lloyd", help="train a codebook on Gaussian samples")
    p.add_argument("--bits", type=int, default=3)
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-7)
    p.set_defaults(func=cmd_lloyd)

    return parser


def cmd_synth(args: argparse.Namespace) -> int:
    geometry = _geometry_from_args(args)
    dump = synth_gaussian_dump(geometry, seed=args.seed, variance=args.variance)
    write_dump(dump, args.output)
    print(f"wrote dump: {args.output} ({geometry.payload_elements} elements)")
    return 0


def cmd_compress(args: argparse.Namespace) -> int:
    if args.synth:
        dump = synth_gaussian_dump(_geometry_from_args(args), seed=args.seed)
    else:
        dump = read_dump(args.input)
    pool = build_pool(dump, sign_seed=args.sign_diagonal)
    save_pool(pool, args.output, packed=args.packed)
    report = distortion_report(dump, pool)
    g = dump.geometry

    exact = compression_ratio_exact(K_BITS, GAUSSIAN_3BIT.bits, g.baseline_bits)
    worst = max(report.layer_stats, key=lambda s: s.v_nmse)
    print(f"wrote pool snapshot: {args.output}" + (" (packed)" if args.packed else ""))
    print(
        f"geometry: layers {g.num_layers}  kv_heads {g.kv_heads}  head_dim {g.head_dim}"
        f"  seq_len {g.seq_len}  batch {g.batch}  baseline {g.baseline_bits}-bit"
    )
    print(
        f"logical ratio  {float(exact):.2f} ({exact.numerator}/{exact.denominator}), "
        f"keys {K_BITS}-bit, values {GAUSSIAN_3BIT.bits}-bit"
    )
    if args.packed:
        print(
            f"physical ratio {report.packed_ratio:.2f} (packed codes), "
            f"pool {report.packed_payload_bytes} B vs baseline {report.baseline_bytes} B"
        )
    else:
        print(
            f"physical ratio {report.physical_ratio:.2f}, "
            f"pool {report.physical_payload_bytes} B vs baseline {report.baseline_bytes} B"
        )
    print(
        f"value distortion: worst layer nmse {worst.v_nmse:.4f} "
        f"(bound {report.v_bound:.4f}); violations: "
        + (",".join(map(str, report.v_bound_violations)) or "none")
    )
    return 0


def cmd_decompress(args: argparse.Namespace) -> int:
    pool = load_pool(args.input)
    view = pool.attach(args.decode_bits)
    layers = [view.get_kv_for_layer(i) for i in range(pool.num_layers)]
    write_dump(KvDump(pool.geometry, tuple(layers)), args.output)
    print(f"wrote dump: {args.output} ({args.decode_bits}-bit decode)")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    dump = read_dump(args.input)
    pool = load_pool(args.pool)
    failures = 0

    def check(name: str, ok: bool, detail: str = "") -> None:
        nonlocal failures
        tag = "ok  " if ok else "FAIL"
        line = f"{tag} - {name}"
        if detail:
            line += f": {detail}"
        print(line)
        if not ok:
            failures += 1

    if dump.geometry != pool.geometry:
        print(
            f"error: dump geometry {dump.geometry} does not match pool geometry "
            f"{pool.geometry}",
            file=sys.stderr,
        )
        return 2

    # payload checksums: rebuilding from the dump must reproduce the pool bits
    reference = build_pool(dump, sign_seed=pool.sign_seed)
    mismatches = []
    for idx in range(pool.num_layers):
        kq, vq = pool.layer_blocks(idx)
        rk, rv = reference.layer_blocks(idx)
        if (
            fnv1a64(kq.codes) != fnv1a64(rk.codes)
            or np.float32(kq.scale) != np.float32(rk.scale)
            or fnv1a64(vq.codes) != fnv1a64(rv.codes)
            or fnv1a64(vq.scales) != fnv1a64(rv.scales)
        ):
            mismatches.append(idx)
    check(
        "payload checksums match a fresh build",
        not mismatches,
        f"checksum mismatch at layers {mismatches}" if mismatches else "",
    )

    # concurrent readers must hand out bit-identical tensors
    n = max(args.agents)
    reference_sums = pool.attach(args.decode_bits).inject_all().checksums()
    transcripts = [None] * n
    barrier = threading.Barrier(n)

    def reader(slot: int) -> None:
        view = pool.attach(args.decode_bits)
        barrier.wait()
        transcripts[slot] = view.inject_all().checksums()

    threads = [threading.Thread(target=reader, args=(i,)) for i in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    disagree = [i for i, t in enumerate(transcripts) if t != reference_sums]
    check(
        f"{n} concurrent readers agree bit-for-bit",
        not disagree,
        f"readers {disagree} diverged" if disagree else "",
    )

    # fidelity bounds against the source dump
    report = distortion_report(dump, pool)
    k_bad = [
        s.layer
        for s in report.layer_stats
        if s.k_max_err > (s.k_scale / 2.0) * (1.0 + 1e-6)
    ]
    check(
        "key error within scale/2 on every layer",
        not k_bad,
        f"layers {k_bad} exceed the bound" if k_bad else "",
    )
    check(
        f"value distortion under the {report.v_bound:.4f} ceiling on every layer",
        not report.v_bound_violations,
        f"layers {list(report.v_bound_violations)} exceed it"
        if report.v_bound_violations
        else "",
    )

    # pool memory must not scale with attached agents
    sizes = []
    for count in args.agents:
        before = pool.payload_nbytes()
        for _ in range(count):
            pool.attach(args.decode_bits)
        sizes.append((count, before, pool.payload_nbytes()))
    invariant = all(b == a == sizes[0][1] for _, b, a in sizes)
    check(
        f"pool bytes invariant across agent counts {args.agents}",
        invariant,
        "" if invariant else f"sizes {sizes}",
    )

    return 0 if failures == 0 else 1


def cmd_simulate(args: argparse.Namespace) -> int:
    geometry = _geometry_from_args(args)
    ratio = compression_ratio(K_BITS, GAUSSIAN_3BIT.bits, geometry.baseline_bits)
    rows = memory_table(geometry, args.agents, ratio, tokens=args.tokens)
    if args.csv:
        print(memory_rows_csv(rows))
    else:
        print(
            f"logical ratio {ratio:.2f}: keys {K_BITS}-bit, values "
            f"{GAUSSIAN_3BIT.bits}-bit, baseline {geometry.baseline_bits}-bit"
        )
        print(format_memory_table(rows))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    geometry = _geometry_from_args(args)
    for agents in args.agents:
        result = run_bench(
            geometry,
            agents=agents,
            repetitions=args.repetitions,
            seed=args.seed,
            decode_bits=args.decode_bits,
        )
        print(
            f"agents {agents:>3}: build {result.build_seconds:.3f}s, "
            f"decode {result.decode_seconds_per_layer * 1e3:.2f} ms/layer, "
            f"throughput {result.aggregate_bytes_per_second / 1e9:.3f} GB/s "
            f"({result.decoded_bytes} B in {result.wall_seconds:.3f}s)"
        )
    return 0


def cmd_lloyd(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    samples = rng.standard_normal(args.samples)
    book = lloyd_max_train(
        samples, bits=args.bits, max_iters=args.max_iters, tol=args.tol
    )
    print(f"trained {args.bits}-bit codebook on {args.samples} N(0,1) samples:")
    print("  " + "  ".join(f"{c:+.4f}" for c in book.centroids))
    if args.bits == GAUSSIAN_3BIT.bits:
        print("canonical table:")
        print("  " + "  ".join(f"{c:+.4f}" for c in GAUSSIAN_3BIT.centroids))
        drift = float(np.max(np.abs(book.centroids - GAUSSIAN_3BIT.centroids)))
        print(f"max drift from canonical: {drift:.4f}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DumpFormatError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (KvPoolError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
