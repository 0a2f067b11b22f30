"""kvbridge: dump HuggingFace KV caches to PKVD files, push them through the
kvpool compression CLI, and measure the perplexity cost on re-injection."""

from .dumpfile import (
    DumpFormatError,
    DumpGeometry,
    FLAG_F32_PAYLOAD,
    HEADER_SIZE,
    PKVD_MAGIC,
    PKVD_VERSION,
    read_dump,
    write_dump,
)
from .evaluator import (
    ExperimentSpec,
    greedy_continuation,
    inject_and_eval,
    ppl_delta_percent,
    split_point,
    teacher_forced_ppl,
)
from .exporter import ExportInfo, default_baseline_bits, export_kv
from .hfcache import CacheLayoutError, build_cache, cache_layers, model_kv_geometry
from .pooltool import DEFAULT_KVPOOL, PoolToolError, compress, decompress, run_kvpool, verify

__all__ = [
    "CacheLayoutError",
    "DEFAULT_KVPOOL",
    "DumpFormatError",
    "DumpGeometry",
    "ExperimentSpec",
    "ExportInfo",
    "FLAG_F32_PAYLOAD",
    "HEADER_SIZE",
    "PKVD_MAGIC",
    "PKVD_VERSION",
    "PoolToolError",
    "build_cache",
    "cache_layers",
    "compress",
    "decompress",
    "default_baseline_bits",
    "export_kv",
    "greedy_continuation",
    "inject_and_eval",
    "model_kv_geometry",
    "ppl_delta_percent",
    "read_dump",
    "run_kvpool",
    "split_point",
    "teacher_forced_ppl",
    "verify",
    "write_dump",
]

__version__ = "0.1.0"
