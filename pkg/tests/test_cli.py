import json
import subprocess
import sys

import numpy as np
import pytest

import unroll_deconv.cli as cli
from unroll_deconv.bench import CSV_COLUMNS, THREADS_ENV, worker_count
from unroll_deconv.data_io import (
    delta_kernel,
    gen_motion_kernel,
    pad_for_kernel,
    read_pgm,
    synthetic_digit,
    write_kernel_text,
    write_pgm,
)
from unroll_deconv.deep_url import DivergenceError
from unroll_deconv.manifest import FORMAT, RunManifest, blob_hash


@pytest.fixture
def files(tmp_path):
    truth = pad_for_kernel(synthetic_digit(2, seed=3), (5, 5))
    (tmp_path / "truth.pgm").write_bytes(write_pgm(truth))
    (tmp_path / "delta.txt").write_text(write_kernel_text(delta_kernel((5, 5))))
    (tmp_path / "motion.txt").write_text(write_kernel_text(gen_motion_kernel((5, 5), 4.0, 0.6, seed=1)))
    assert cli.run(["blur", "--image", str(tmp_path / "truth.pgm"), "--kernel", str(tmp_path / "motion.txt"),
                    "--out", str(tmp_path / "blur")]) == 0
    return tmp_path


def manifest(path):
    return RunManifest.read(path / "manifest.json")


class TestBlur:
    def test_delta_identity(self, files):
        out = files / "b0"
        code = cli.run(["blur", "--image", str(files / "truth.pgm"), "--kernel", str(files / "delta.txt"),
                        "--sigma", "0", "--out", str(out)])
        assert code == 0
        assert (out / "blurred.pgm").read_bytes() == (files / "truth.pgm").read_bytes()

    def test_random_kernel_seeded(self, files):
        args = ["blur", "--image", str(files / "truth.pgm"), "--kernel-size", "5", "5", "--seed", "4",
                "--sigma", "0.01"]
        assert cli.run(args + ["--out", str(files / "r1")]) == 0
        assert cli.run(args + ["--out", str(files / "r2")]) == 0
        for name in ("blurred.pgm", "kernel.txt"):
            assert (files / "r1" / name).read_bytes() == (files / "r2" / name).read_bytes()

    def test_manifest_fields(self, files):
        m = manifest(files / "blur")
        assert m.command == "blur" and m.format == FORMAT
        assert m.inputs["image"]["hash"] == blob_hash((files / "truth.pgm").read_bytes())
        assert m.outputs["blurred.pgm"] == blob_hash((files / "blur" / "blurred.pgm").read_bytes())
        assert "--out" not in m.config["argv"]


class TestDeblur:
    def test_rl(self, files, capsys):
        code = cli.run(["rl", "--image", str(files / "blur" / "blurred.pgm"), "--truth", str(files / "truth.pgm"),
                        "--kernel", str(files / "motion.txt"), "--layers", "3", "--out", str(files / "rl")])
        assert code == 0
        m = manifest(files / "rl")
        assert set(m.metrics) >= {"psnr", "isnr", "ssim", "kernel_rmse_raw", "kernel_rmse_aligned"}
        assert len(m.loss_history) == 3
        assert "psnr:" in capsys.readouterr().out

    def test_durl_transfer_eval(self, files):
        blurred = str(files / "blur" / "blurred.pgm")
        assert cli.run(["durl", "--image", blurred, "--truth", str(files / "truth.pgm"), "--kernel",
                        str(files / "motion.txt"), "--epochs", "4", "--layers", "2", "--lambda", "0.05",
                        "--lr", "0.05", "--out", str(files / "du")]) == 0
        m = manifest(files / "du")
        assert len(m.loss_history) == 4
        assert m.config["train"]["lam"] == 0.05 and m.config["train"]["lr0"] == 0.05
        assert cli.run(["transfer", "--weights", str(files / "du" / "weights.npz"), "--image", blurred,
                        "--truth", str(files / "truth.pgm"), "--out", str(files / "tr")]) == 0
        est = read_pgm((files / "tr" / "estimate.pgm").read_bytes())
        assert est.shape == (32, 32)
        assert cli.run(["eval", "--truth", str(files / "truth.pgm"), "--image", str(files / "tr" / "estimate.pgm"),
                        "--blurred", blurred, "--kernel", str(files / "motion.txt"), "--kernel-est",
                        str(files / "tr" / "kernel_est.txt"), "--out", str(files / "ev")]) == 0
        assert set(manifest(files / "ev").metrics) == {"psnr", "isnr", "ssim", "kernel_rmse_raw",
                                                         "kernel_rmse_aligned", "kernel_rmse_unnormalized"}

    def test_durl_batch(self, files):
        blurred = str(files / "blur" / "blurred.pgm")
        assert cli.run(["durl", "--image", blurred, "--image", blurred, "--epochs", "2",
                        "--out", str(files / "b")]) == 0
        assert (files / "b" / "estimate_1.pgm").exists()

    def test_boundary_flag(self, files):
        # A zero frame as wide as the kernel reach would hide the wrap-around terms.
        blurred = str(files / "noise.pgm")
        (files / "noise.pgm").write_bytes(write_pgm(np.random.default_rng(0).uniform(size=(12, 12))))
        for mode in ("circular", "zeropad"):
            assert cli.run(["rl", "--image", blurred, "--boundary", mode, "--out", str(files / mode)]) == 0
        assert manifest(files / "circular").loss_history != manifest(files / "zeropad").loss_history


class TestGradcheck:
    def test_passes(self, tmp_path, capsys):
        assert cli.run(["gradcheck", "--layers", "2", "--image", "8", "--kernel", "3", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        err = float(out.split()[3])
        assert err < 1e-4
        assert manifest(tmp_path).metrics["max_relative_error"] == err or abs(
            manifest(tmp_path).metrics["max_relative_error"] - err) < 1e-12

    def test_failure_code(self, tmp_path, monkeypatch):
        monkeypatch.setattr(cli, "gradcheck_error", lambda *a, **k: 0.5)
        assert cli.run(["gradcheck", "--out", str(tmp_path)]) == cli.EXIT_CHECK


class TestExitCodes:
    def test_distinct(self):
        codes = [cli.EXIT_USAGE, cli.EXIT_MISSING, cli.EXIT_CONFIG, cli.EXIT_FORMAT, cli.EXIT_DIVERGED,
                 cli.EXIT_CHECK]
        assert len(set(codes)) == len(codes) and cli.EXIT_OK not in codes

    def test_unknown_flag(self, tmp_path):
        assert cli.run(["rl", "--image", "x.pgm", "--frobnicate"]) == cli.EXIT_USAGE

    def test_unknown_command(self):
        assert cli.run(["sharpen"]) == cli.EXIT_USAGE

    def test_bad_boundary(self):
        assert cli.run(["rl", "--image", "x.pgm", "--boundary", "reflect"]) == cli.EXIT_USAGE

    def test_missing_file(self, tmp_path):
        assert cli.run(["rl", "--image", str(tmp_path / "nope.pgm"), "--out", str(tmp_path)]) == cli.EXIT_MISSING

    def test_malformed_pgm(self, tmp_path):
        (tmp_path / "bad.pgm").write_bytes(b"P6\n1 1\n255\n\x00")
        assert cli.run(["rl", "--image", str(tmp_path / "bad.pgm"), "--out", str(tmp_path)]) == cli.EXIT_FORMAT

    def test_malformed_kernel(self, files):
        (files / "bad.txt").write_text("2 2\n1 2\n")
        assert cli.run(["blur", "--image", str(files / "truth.pgm"), "--kernel", str(files / "bad.txt"),
                        "--out", str(files / "x")]) == cli.EXIT_FORMAT

    @pytest.mark.parametrize("flags", [["--layers", "0"], ["--epochs", "0"], ["--batch", "0"],
                                       ["--kernel-size", "40", "40"]])
    def test_config_validation(self, files, flags):
        code = cli.run(["durl", "--image", str(files / "blur" / "blurred.pgm"), *flags, "--out", str(files / "x")])
        assert code == cli.EXIT_CONFIG

    def test_divergence(self, files, monkeypatch):
        def boom(*a, **k):
            raise DivergenceError("non-finite loss nan", 3, 17)

        monkeypatch.setattr(cli, "train", boom)
        code = cli.run(["durl", "--image", str(files / "blur" / "blurred.pgm"), "--out", str(files / "x")])
        assert code == cli.EXIT_DIVERGED


class TestReplay:
    @pytest.mark.parametrize("argv", [
        ["rl", "--layers", "4", "--seed", "3"],
        ["durl", "--epochs", "3", "--seed", "2"],
        ["blur", "--sigma", "0.02", "--seed", "5"],
    ])
    def test_reproduces(self, files, argv, capsys):
        image = files / ("truth.pgm" if argv[0] == "blur" else "blur/blurred.pgm")
        out = files / "run"
        assert cli.run(argv + ["--image", str(image), "--truth", str(files / "truth.pgm"), "--out", str(out)]
                       if argv[0] != "blur" else argv + ["--image", str(image), "--out", str(out)]) == 0
        assert cli.run(["replay", str(out / "manifest.json")]) == 0
        assert "reproduced" in capsys.readouterr().out

    def test_metric_mismatch(self, files):
        out = files / "run"
        assert cli.run(["rl", "--image", str(files / "blur" / "blurred.pgm"), "--truth", str(files / "truth.pgm"),
                        "--out", str(out)]) == 0
        m = manifest(out)
        m.metrics["psnr"] = np.nextafter(m.metrics["psnr"], np.inf)
        m.write(out / "manifest.json")
        assert cli.run(["replay", str(out / "manifest.json")]) == cli.EXIT_CHECK

    def test_changed_input(self, files):
        out = files / "run"
        target = files / "copy.pgm"
        target.write_bytes((files / "blur" / "blurred.pgm").read_bytes())
        assert cli.run(["rl", "--image", str(target), "--out", str(out)]) == 0
        target.write_bytes(write_pgm(np.zeros((32, 32))))
        assert cli.run(["replay", str(out / "manifest.json")]) == cli.EXIT_CHECK

    def test_missing_manifest(self, tmp_path):
        assert cli.run(["replay", str(tmp_path / "manifest.json")]) == cli.EXIT_MISSING

    def test_not_a_manifest(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"format": "other"}))
        assert cli.run(["replay", str(tmp_path / "m.json")]) == cli.EXIT_FORMAT


class TestBench:
    def test_tiny_run(self, tmp_path, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "1")
        code = cli.run(["bench", "mnist", "--count", "2", "--layers", "1", "--epochs", "2", "--out", str(tmp_path)])
        assert code == 0
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0].split(",") == CSV_COLUMNS
        assert len(lines) == 1 + 4
        assert "PSNR" in (tmp_path / "table.txt").read_text()
        assert cli.run(["replay", str(tmp_path / "manifest.json")]) == 0

    def test_idx_input(self, tmp_path):
        import struct

        imgs = np.stack([np.rint(synthetic_digit(d, seed=d) * 255) for d in range(3)]).astype(np.uint8)
        (tmp_path / "imgs.idx").write_bytes(struct.pack(">IIII", 0x803, 3, 28, 28) + imgs.tobytes())
        assert cli.run(["bench", "mnist", "--image", str(tmp_path / "imgs.idx"), "--count", "1", "--layers", "1",
                        "--epochs", "1", "--out", str(tmp_path / "o")]) == 0
        assert cli.run(["bench", "mnist", "--image", str(tmp_path / "imgs.idx"), "--count", "9",
                        "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG

    def test_thread_cap(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "3")
        assert worker_count() == 3
        monkeypatch.delenv(THREADS_ENV)
        assert worker_count() >= 1

    def test_pool_matches_serial(self):
        from unroll_deconv.bench import desk_suite, run_benchmark

        items = desk_suite(2, seed=1)
        strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]  # noqa: E731
        assert strip(run_benchmark(items, 1, 2, workers=1)) == strip(run_benchmark(items, 1, 2, workers=2))


class TestEntryPoints:
    def test_module(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "unroll_deconv", "gradcheck", "--layers", "1", "--image", "6",
                               "--kernel", "3", "--out", str(tmp_path)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert "max relative error" in proc.stdout

    def test_usage_exit_code(self):
        proc = subprocess.run([sys.executable, "-m", "unroll_deconv", "--nope"], capture_output=True, text=True)
        assert proc.returncode == 2
