"""Asymmetric KV-cache compression with a write-once shared pool.

Keys keep 8 bits with a per-tensor scale; values are rotated,
RMS-normalized, and coded at 3 bits against a Gaussian codebook. One
compressed pool serves any number of concurrent agents, which is where
the aggregate memory win comes from.
"""

from .bench import BenchResult, run_bench
from .checksum import fnv1a64, tensor_checksum
from .errors import (
    BadMagicError,
    CorruptBlockError,
    DumpFormatError,
    GeometryError,
    KvPoolError,
    NonFiniteValuesError,
    PayloadSizeError,
    TruncatedFileError,
    UnsealedPoolError,
    UnsupportedVersionError,
)
from .fwht import fwht_inplace, hadamard_order, rotate_forward, rotate_inverse
from .keyquant import QuantizedKeyBlock, dequantize_k, quantize_k
from .metrics import (
    CompressionReport,
    MemoryRow,
    PplDelta,
    compression_ratio,
    compression_ratio_exact,
    distortion_report,
    format_memory_table,
    memory_rows_csv,
    memory_table,
    ppl_delta,
)
from .model import (
    KvDump,
    KvTensor,
    ModelGeometry,
    read_dump,
    synth_gaussian_dump,
    write_dump,
)
from .pool import (
    AgentCacheView,
    InjectionTranscript,
    LayerStats,
    SharedPool,
    TranscriptEntry,
    attach_agent,
    build_pool,
    load_pool,
    round_to_bfloat16,
    save_pool,
)
from .valuequant import (
    GAUSSIAN_3BIT,
    Codebook,
    DistortionBound,
    QuantizedValueBlock,
    dequantize_v,
    lloyd_max_train,
    nearest_centroid,
    pack_indices_3bit,
    quantize_v,
    sign_diagonal,
    unpack_indices_3bit,
)

__version__ = "0.1.0"

__all__ = [
    "AgentCacheView",
    "BadMagicError",
    "BenchResult",
    "Codebook",
    "CompressionReport",
    "CorruptBlockError",
    "DistortionBound",
    "DumpFormatError",
    "GAUSSIAN_3BIT",
    "GeometryError",
    "InjectionTranscript",
    "KvDump",
    "KvPoolError",
    "KvTensor",
    "LayerStats",
    "MemoryRow",
    "ModelGeometry",
    "NonFiniteValuesError",
    "PayloadSizeError",
    "PplDelta",
    "QuantizedKeyBlock",
    "QuantizedValueBlock",
    "SharedPool",
    "TranscriptEntry",
    "TruncatedFileError",
    "UnsealedPoolError",
    "UnsupportedVersionError",
    "attach_agent",
    "build_pool",
    "compression_ratio",
    "compression_ratio_exact",
    "dequantize_k",
    "dequantize_v",
    "distortion_report",
    "fnv1a64",
    "format_memory_table",
    "fwht_inplace",
    "hadamard_order",
    "load_pool",
    "lloyd_max_train",
    "memory_rows_csv",
    "memory_table",
    "nearest_centroid",
    "pack_indices_3bit",
    "ppl_delta",
    "quantize_k",
    "quantize_v",
    "read_dump",
    "rotate_forward",
    "rotate_inverse",
    "round_to_bfloat16",
    "run_bench",
    "save_pool",
    "sign_diagonal",
    "synth_gaussian_dump",
    "tensor_checksum",
    "unpack_indices_3bit",
    "write_dump",
]
