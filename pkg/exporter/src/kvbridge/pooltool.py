"""Thin subprocess wrapper around the ``kvpool`` executable.

The quantization math lives in exactly one place, the pool tool. This module
only shells out and moves files, so the bridge and the pool can disagree
about nothing but bytes on disk.
"""

from __future__ import annotations

import subprocess
from pathlib import Path
from typing import Sequence

DEFAULT_KVPOOL: tuple[str, ...] = ("kvpool",)


class PoolToolError(RuntimeError):
    """The pool executable failed or is missing."""

    def __init__(self, argv: Sequence[str], returncode: int, stderr: str):
        self.argv = list(argv)
        self.returncode = returncode
        self.stderr = stderr
        super().__init__(
            f"{' '.join(self.argv)} exited {returncode}: {stderr.strip() or '(no stderr)'}"
        )


def run_kvpool(args: Sequence[str], kvpool_cmd: Sequence[str] = DEFAULT_KVPOOL) -> str:
    argv = [*kvpool_cmd, *args]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True)
    except FileNotFoundError as exc:
        raise PoolToolError(argv, -1, f"executable not found: {exc}") from exc
    if proc.returncode != 0:
        raise PoolToolError(argv, proc.returncode, proc.stderr)
    return proc.stdout


def compress(
    dump_path: str | Path,
    pool_path: str | Path,
    *,
    packed: bool = False,
    sign_seed: int | None = None,
    kvpool_cmd: Sequence[str] = DEFAULT_KVPOOL,
) -> str:
    args = ["compress", "--input", str(dump_path), "--output", str(pool_path)]
    if packed:
        args.append("--packed")
    if sign_seed is not None:
        args.extend(["--sign-diagonal", str(sign_seed)])
    return run_kvpool(args, kvpool_cmd)


def decompress(
    pool_path: str | Path,
    dump_path: str | Path,
    *,
    decode_bits: int = 16,
    kvpool_cmd: Sequence[str] = DEFAULT_KVPOOL,
) -> str:
    args = [
        "decompress",
        "--input",
        str(pool_path),
        "--output",
        str(dump_path),
        "--decode-bits",
        str(decode_bits),
    ]
    return run_kvpool(args, kvpool_cmd)


def verify(
    dump_path: str | Path,
    pool_path: str | Path,
    *,
    agents: Sequence[int] = (1,),
    decode_bits: int = 16,
    kvpool_cmd: Sequence[str] = DEFAULT_KVPOOL,
) -> str:
    args = [
        "verify",
        "--input",
        str(dump_path),
        "--pool",
        str(pool_path),
        "--agents",
        ",".join(str(a) for a in agents),
        "--decode-bits",
        str(decode_bits),
    ]
    return run_kvpool(args, kvpool_cmd)
