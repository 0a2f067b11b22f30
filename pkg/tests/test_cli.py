"""End-to-end command-line flows and exit codes."""

import numpy as np
import pytest

from kvpool import load_pool, read_dump
from kvpool.cli import main
from kvpool.pool import POOL_HEADER_SIZE

GEOMETRY_FLAGS = ["--layers", "2", "--kv-heads", "2", "--head-dim", "64", "--seq-len", "32"]


def make_pair(tmp_path, extra_compress=()):
    dump = tmp_path / "d.pkvd"
    pool = tmp_path / "p.pkvp"
    assert main(["synth", "--output", str(dump), *GEOMETRY_FLAGS, "--seed", "1"]) == 0
    args = ["compress", "--input", str(dump), "--output", str(pool), *extra_compress]
    assert main(args) == 0
    return dump, pool


class TestCompressFlow:
    def test_synth_compress_verify(self, tmp_path, capsys):
        dump, pool = make_pair(tmp_path)
        code = main(["verify", "--input", str(dump), "--pool", str(pool), "--agents", "3,5"])
        out = capsys.readouterr().out
        assert code == 0
        assert out.count("ok  ") == 5
        assert "FAIL" not in out

    def test_compress_reports_the_ratio(self, tmp_path, capsys):
        make_pair(tmp_path)
        out = capsys.readouterr().out
        assert "2.91" in out
        assert "32/11" in out

    def test_compress_from_synthetic_source(self, tmp_path, capsys):
        pool = tmp_path / "p.pkvp"
        code = main(["compress", "--synth", "--output", str(pool), *GEOMETRY_FLAGS, "--seed", "3"])
        assert code == 0
        assert pool.exists()

    def test_compress_requires_one_source(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["compress", "--output", str(tmp_path / "p.pkvp")])
        assert exc.value.code == 2

    def test_compress_rejects_garbage_input(self, tmp_path, capsys):
        bad = tmp_path / "bad.pkvd"
        bad.write_bytes(b"not a dump at all")
        code = main(["compress", "--input", str(bad), "--output", str(tmp_path / "p.pkvp")])
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_packed_flag_shrinks_the_snapshot(self, tmp_path):
        _, unpacked = make_pair(tmp_path)
        packed = tmp_path / "packed.pkvp"
        dump = tmp_path / "d.pkvd"
        assert main(["compress", "--input", str(dump), "--output", str(packed), "--packed"]) == 0
        assert packed.stat().st_size < unpacked.stat().st_size


class TestVerify:
    def test_flipped_payload_byte_fails_checksums(self, tmp_path, capsys):
        dump, pool = make_pair(tmp_path)
        raw = bytearray(pool.read_bytes())
        # flip one key code in the middle of the first layer's payload
        raw[POOL_HEADER_SIZE + 4 + 100] ^= 0x5A
        pool.write_bytes(raw)
        code = main(["verify", "--input", str(dump), "--pool", str(pool), "--agents", "3"])
        out = capsys.readouterr().out
        assert code == 1
        assert "checksum mismatch" in out

    def test_geometry_mismatch_is_usage_error(self, tmp_path, capsys):
        _, pool = make_pair(tmp_path)
        other = tmp_path / "other.pkvd"
        assert main(["synth", "--output", str(other), "--layers", "2", "--kv-heads", "2",
                     "--head-dim", "64", "--seq-len", "16"]) == 0
        code = main(["verify", "--input", str(other), "--pool", str(pool)])
        assert code == 2
        assert "geometry" in capsys.readouterr().err

    def test_sign_diagonal_pools_verify(self, tmp_path, capsys):
        dump = tmp_path / "d.pkvd"
        pool = tmp_path / "p.pkvp"
        assert main(["synth", "--output", str(dump), *GEOMETRY_FLAGS]) == 0
        assert main(["compress", "--input", str(dump), "--output", str(pool),
                     "--sign-diagonal", "7"]) == 0
        assert main(["verify", "--input", str(dump), "--pool", str(pool), "--agents", "2"]) == 0


class TestDecompress:
    @pytest.mark.parametrize("bits", ["16", "32"])
    def test_matches_direct_decode(self, tmp_path, bits):
        _, pool_path = make_pair(tmp_path)
        out = tmp_path / "back.pkvd"
        assert main(["decompress", "--input", str(pool_path), "--output", str(out),
                     "--decode-bits", bits]) == 0
        reconstructed = read_dump(out)
        view = load_pool(pool_path).attach(int(bits))
        for i, (k, v) in enumerate(reconstructed.layers):
            kd, vd = view.get_kv_for_layer(i)
            assert np.array_equal(k.values, kd.values)
            assert np.array_equal(v.values, vd.values)

    def test_packed_decodes_identically(self, tmp_path):
        dump, unpacked = make_pair(tmp_path)
        packed = tmp_path / "packed.pkvp"
        assert main(["compress", "--input", str(dump), "--output", str(packed), "--packed"]) == 0
        out_u = tmp_path / "u.pkvd"
        out_p = tmp_path / "p.pkvd"
        assert main(["decompress", "--input", str(unpacked), "--output", str(out_u)]) == 0
        assert main(["decompress", "--input", str(packed), "--output", str(out_p)]) == 0
        assert out_u.read_bytes() == out_p.read_bytes()


class TestSimulate:
    def test_reference_reductions(self, capsys):
        assert main(["simulate", "--agents", "3,5,10,15", "--seq-len", "1837"]) == 0
        out = capsys.readouterr().out
        for value in ("88.5", "93.1", "96.6", "97.7"):
            assert value in out

    def test_single_agent_row(self, capsys):
        assert main(["simulate", "--agents", "1", "--tokens", "1837"]) == 0
        assert "65.6" in capsys.readouterr().out

    def test_csv_output(self, capsys):
        assert main(["simulate", "--agents", "3", "--tokens", "1837", "--csv"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "agents,tokens,baseline_bytes,pool_bytes,reduction_percent"
        assert lines[1].startswith("3,1837,722337792,")

    def test_rejects_empty_agent_list(self):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--agents", ""])
        assert exc.value.code == 2

    def test_rejects_bad_geometry(self, capsys):
        assert main(["simulate", "--agents", "3", "--head-dim", "96"]) == 2
        assert "power of two" in capsys.readouterr().err


class TestOtherCommands:
    def test_bench_smoke(self, capsys):
        code = main(["bench", "--layers", "2", "--kv-heads", "2", "--head-dim", "32",
                     "--seq-len", "16", "--agents", "2", "--repetitions", "1"])
        assert code == 0
        assert "throughput" in capsys.readouterr().out

    def test_lloyd_smoke(self, capsys):
        code = main(["lloyd", "--bits", "2", "--samples", "5000", "--seed", "1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "trained 2-bit codebook" in out

    def test_lloyd_reports_drift_at_three_bits(self, capsys):
        code = main(["lloyd", "--bits", "3", "--samples", "200000", "--seed", "0"])
        assert code == 0
        out = capsys.readouterr().out
        assert "max drift from canonical" in out
