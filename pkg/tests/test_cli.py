import json

import pytest

from specqd.cli import main
from specqd.tinylm import model_checksum
from specqd import artifacts


@pytest.fixture()
def models(tmp_path):
    """A small target and its MXFP4 cast on disk, plus a prompts file."""
    target = tmp_path / "target.bin"
    draft = tmp_path / "draft.bin"
    assert main([
        "model-init", "--seed", "0", "--d-model", "32", "--n-layers", "2",
        "--n-heads", "2", "--d-ff", "64", "--max-seq-len", "128",
        "--out", str(target),
    ]) == 0
    assert main(["quantize", "--model", str(target), "--out", str(draft)]) == 0
    prompts = tmp_path / "prompts.txt"
    prompts.write_text("1 2 3\n9\n40 41\n")
    return target, draft, prompts


class TestModelInit:
    def test_deterministic_across_runs(self, tmp_path, capsys):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        for out in (a, b):
            main(["model-init", "--seed", "4", "--d-model", "32",
                  "--n-heads", "2", "--out", str(out)])
        assert a.read_bytes() == b.read_bytes()

    def test_bad_config_returns_1(self, tmp_path, capsys):
        rc = main(["model-init", "--d-model", "33", "--n-heads", "2",
                   "--out", str(tmp_path / "x.bin")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestQuantize:
    def test_reduction_reported(self, models, tmp_path, capsys):
        target, _, _ = models
        capsys.readouterr()
        rc = main(["quantize", "--model", str(target),
                   "--out", str(tmp_path / "q2.bin")])
        assert rc == 0
        assert "7.53x reduction" in capsys.readouterr().out

    def test_quantized_file_loads(self, models):
        _, draft, _ = models
        m = artifacts.load_model(draft)
        assert m.is_quantized

    def test_missing_input_returns_1(self, tmp_path, capsys):
        rc = main(["quantize", "--model", str(tmp_path / "absent.bin"),
                   "--out", str(tmp_path / "o.bin")])
        assert rc == 1


class TestGenerate:
    def test_greedy_only(self, models, tmp_path, capsys):
        target, _, prompts = models
        out_dir = tmp_path / "greedy"
        rc = main(["generate", "--target", str(target), "--prompts",
                   str(prompts), "--max-new", "8", "--out", str(out_dir)])
        assert rc == 0
        tokens_lines = capsys.readouterr().out.strip().splitlines()[-3:]
        assert all(len(line.split()) == 8 for line in tokens_lines)
        assert (out_dir / "summary.json").exists()

    def test_speculative_outputs(self, models, tmp_path, capsys):
        target, draft, prompts = models
        out_dir = tmp_path / "spec"
        rc = main([
            "generate", "--target", str(target), "--draft", str(draft),
            "--spec-len", "4", "--spec-len", "4",
            "--threshold", "0.0", "--threshold", "0.0",
            "--prompts", str(prompts), "--max-new", "12",
            "--check-lossless", "--out", str(out_dir),
        ])
        assert rc == 0
        summary = json.loads((out_dir / "summary.json").read_text())
        assert "geomean_speedup" in summary and "1" in summary["per_level_alpha"]
        rounds = (out_dir / "rounds.csv").read_text().splitlines()
        assert rounds[0] == "level,proposed,accepted,draft_ms,verify_ms"
        assert len(rounds) > 1
        acc = (out_dir / "acceptance.csv").read_text().splitlines()
        assert acc[0] == "prompt,level,alpha"
        assert len(acc) == 4  # 3 prompts x 1 draft level

    def test_lossless_flag_output_matches_greedy(self, models, tmp_path, capsys):
        target, draft, prompts = models
        rc1 = main(["generate", "--target", str(target), "--prompts",
                    str(prompts), "--max-new", "10",
                    "--out", str(tmp_path / "g")])
        greedy_out = capsys.readouterr().out.strip().splitlines()
        rc2 = main(["generate", "--target", str(target), "--draft", str(draft),
                    "--threshold", "0.4", "--threshold", "0.4",
                    "--prompts", str(prompts), "--max-new", "10",
                    "--check-lossless", "--out", str(tmp_path / "s")])
        spec_out = capsys.readouterr().out.strip().splitlines()
        assert rc1 == rc2 == 0
        assert greedy_out[-3:] == spec_out[-3:]

    def test_empty_prompts_error(self, models, tmp_path, capsys):
        target, _, _ = models
        empty = tmp_path / "empty.txt"
        empty.write_text("\n")
        rc = main(["generate", "--target", str(target), "--prompts",
                   str(empty), "--out", str(tmp_path / "o")])
        assert rc == 1


class TestGemmBench:
    def test_csv_written(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        rc = main(["gemm-bench", "--m", "64", "--k", "64", "--n", "1", "2",
                   "--paths", "int8", "--reps", "9", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "path,M,N,K,bytes,seconds,gbps"
        assert len(lines) == 3

    def test_bad_shape(self, tmp_path, capsys):
        rc = main(["gemm-bench", "--m", "8", "--k", "33",
                   "--out", str(tmp_path / "b.csv")])
        assert rc == 1


class TestSurfaceAndRoofline:
    def test_surface_single(self, tmp_path, capsys):
        out = tmp_path / "surface.csv"
        rc = main(["speedup-surface", "--grid", "11", "--s", "4", "20",
                   "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "alpha,S,speedup"
        assert len(lines) == 1 + 11 * 2

    def test_surface_multi(self, tmp_path, capsys):
        out = tmp_path / "multi.csv"
        rc = main(["speedup-surface", "--mode", "multi", "--grid", "5",
                   "--out", str(out)])
        assert rc == 0
        assert out.read_text().startswith("alpha_inner,alpha_outer,speedup")

    def test_roofline_table(self, tmp_path, capsys):
        out = tmp_path / "roof.csv"
        rc = main(["roofline", "--m", "512", "--k", "512", "--n", "1", "8",
                   "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "format,M,N,K,intensity,attainable_flops"
        assert len(lines) == 1 + 2 * 3  # two N values x three formats
