"""Timing harness: build cost, per-layer decode latency, reader throughput.

Throughput runs real threads over one shared pool. Decompression is
numpy-bound and releases the GIL for most of its time, so on multicore
hosts aggregate bytes/sec grows with reader count; on a single core it
should at least not collapse.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

from .model import ModelGeometry, synth_gaussian_dump
from .pool import SharedPool, build_pool


@dataclass(frozen=True)
class BenchResult:
    geometry: ModelGeometry
    agents: int
    repetitions: int
    build_seconds: float
    decode_seconds_per_layer: float
    decoded_bytes: int
    wall_seconds: float
    aggregate_bytes_per_second: float


def run_bench(
    geometry: ModelGeometry,
    agents: int = 1,
    repetitions: int = 3,
    seed: int = 0,
    decode_bits: int = 16,
) -> BenchResult:
    """Build a pool from a synthetic dump and sweep it with N readers.

    Each reader attaches its own view and decompresses every layer
    ``repetitions`` times. Bytes are counted on the decoded (f32)
    tensors handed to the caller.
    """
    if agents < 1:
        raise ValueError(f"agents must be >= 1, got {agents}")
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")

    dump = synth_gaussian_dump(geometry, seed=seed)
    t0 = time.perf_counter()
    pool = build_pool(dump)
    build_seconds = time.perf_counter() - t0

    # single-reader latency, one timed sweep after one warmup layer
    view = pool.attach(decode_bits)
    view.get_kv_for_layer(0)
    t0 = time.perf_counter()
    for idx in range(pool.num_layers):
        view.get_kv_for_layer(idx)
    decode_seconds_per_layer = (time.perf_counter() - t0) / pool.num_layers

    decoded = _sweep_threads(pool, agents, repetitions, decode_bits)
    return BenchResult(
        geometry=geometry,
        agents=agents,
        repetitions=repetitions,
        build_seconds=build_seconds,
        decode_seconds_per_layer=decode_seconds_per_layer,
        decoded_bytes=decoded[0],
        wall_seconds=decoded[1],
        aggregate_bytes_per_second=decoded[0] / decoded[1] if decoded[1] > 0 else 0.0,
    )


def _sweep_threads(
    pool: SharedPool, agents: int, repetitions: int, decode_bits: int
) -> tuple[int, float]:
    byte_counts = [0] * agents
    start = threading.Barrier(agents + 1)

    def reader(slot: int) -> None:
        view = pool.attach(decode_bits)
        start.wait()
        total = 0
        for _ in range(repetitions):
            for idx in range(pool.num_layers):
                k, v = view.get_kv_for_layer(idx)
                total += k.values.nbytes + v.values.nbytes
        byte_counts[slot] = total

    threads = [threading.Thread(target=reader, args=(i,)) for i in range(agents)]
    for t in threads:
        t.start()
    start.wait()
    t0 = time.perf_counter()
    for t in threads:
        t.join()
    wall = time.perf_counter() - t0
    return sum(byte_counts), wall
