"""End-to-end command-line tests on a tiny on-disk dataset."""

import subprocess
import sys

import numpy as np
import pytest

from pgate.cli import main
from pgate.data import save_idx_images, save_idx_labels


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(101)
    save_idx_images(d / "train-images.idx", rng.integers(0, 256, (48, 8, 8)).astype(np.uint8))
    save_idx_labels(d / "train-labels.idx", rng.integers(0, 4, 48).astype(np.uint8))
    save_idx_images(d / "test-images.idx", rng.integers(0, 256, (16, 8, 8)).astype(np.uint8))
    save_idx_labels(d / "test-labels.idx", rng.integers(0, 4, 16).astype(np.uint8))
    return d


def config_text(workdir, arch="mlp", out="out", checkpoint=None, extras=""):
    head = f"[experiment]\nname = t\noutput_dir = {workdir / out}\n"
    if checkpoint:
        head += f"checkpoint = {checkpoint}\n"
    model = (f"[model]\narch = {arch}\nclasses = 4\nhidden = 8\nchannels = 4,4\n")
    return head + (
        f"[dataset]\n"
        f"train_images = {workdir}/train-images.idx\n"
        f"train_labels = {workdir}/train-labels.idx\n"
        f"test_images = {workdir}/test-images.idx\n"
        f"test_labels = {workdir}/test-labels.idx\n"
        + model +
        "[pg]\nbits = 4\nmsb_bits = 2\n"
        "[train]\nepochs = 1\nbatch_size = 16\nlr = 0.05\nseed = 0\n"
        + extras)


def write_config(workdir, name, **kwargs):
    p = workdir / name
    p.write_text(config_text(workdir, **kwargs))
    return p


@pytest.fixture(scope="module")
def trained(workdir):
    cfg = write_config(workdir, "train.ini", arch="mlp", out="run1")
    assert main(["train", "--config", str(cfg)]) == 0
    return workdir / "run1"


class TestTrain:
    def test_outputs(self, workdir, trained, capsys):
        assert (trained / "metrics.csv").is_file()
        assert (trained / "results.csv").is_file()
        assert (trained / "checkpoint" / "manifest.json").is_file()

    def test_repeat_run_is_byte_identical(self, workdir, trained):
        cfg = write_config(workdir, "train2.ini", arch="mlp", out="run2")
        assert main(["train", "--config", str(cfg)]) == 0
        for fname in ("metrics.csv", "results.csv"):
            assert (workdir / "run2" / fname).read_bytes() == (trained / fname).read_bytes()

    def test_seed_override_changes_run(self, workdir, trained):
        cfg = write_config(workdir, "train3.ini", arch="mlp", out="run3")
        assert main(["train", "--config", str(cfg), "--seed", "9"]) == 0
        assert ((workdir / "run3" / "metrics.csv").read_bytes()
                != (trained / "metrics.csv").read_bytes())

    def test_out_flag_overrides_config(self, workdir):
        cfg = write_config(workdir, "train4.ini", arch="mlp", out="ignored")
        assert main(["train", "--config", str(cfg), "--out", str(workdir / "flagged")]) == 0
        assert (workdir / "flagged" / "results.csv").is_file()


class TestEvalSweep:
    def test_eval_matches_training_results(self, workdir, trained):
        cfg = write_config(workdir, "eval.ini", out="evalout",
                           checkpoint=trained / "checkpoint")
        assert main(["eval", "--config", str(cfg)]) == 0
        eval_row = (workdir / "evalout" / "eval.csv").read_text().splitlines()[1]
        results_row = (trained / "results.csv").read_text().splitlines()[1]
        assert eval_row == results_row  # same model, same set, same numbers

    def test_sweep_covers_thresholds_in_order(self, workdir, trained):
        cfg = write_config(workdir, "sweep.ini", out="sweepout",
                           checkpoint=trained / "checkpoint",
                           extras="[sweep]\nthresholds = -100,0,100\n")
        assert main(["sweep", "--config", str(cfg)]) == 0
        lines = (workdir / "sweepout" / "sweep.csv").read_text().splitlines()
        assert len(lines) == 4
        sp = [float(l.split(",")[1]) for l in lines[1:]]
        assert sp[0] == 0.0 and sp[-1] == 1.0
        assert sp == sorted(sp)


class TestBenchMaps:
    def test_bench_writes_rows(self, workdir):
        cfg = write_config(workdir, "bench.ini", out="benchout",
                           extras="[bench]\ndims = 4,8,16\nsparsities = 0.5,0.9\nrepeats = 3\n")
        assert main(["bench", "--config", str(cfg)]) == 0
        lines = (workdir / "benchout" / "bench.csv").read_text().splitlines()
        assert len(lines) == 4  # header + gemm + 2 sddmm rows

    def test_export_maps_defaults_to_last_gated_conv(self, workdir):
        cfg = write_config(workdir, "cnntrain.ini", arch="cnn", out="cnnrun")
        assert main(["train", "--config", str(cfg)]) == 0
        mcfg = write_config(workdir, "maps.ini", arch="cnn", out="mapsout",
                            checkpoint=workdir / "cnnrun" / "checkpoint",
                            extras="[maps]\ncount = 3\n")
        assert main(["export-maps", "--config", str(mcfg)]) == 0
        files = sorted((workdir / "mapsout" / "maps").glob("*.pgm"))
        assert [f.name for f in files] == [
            "map_conv2_000.pgm", "map_conv2_001.pgm", "map_conv2_002.pgm"]


class TestExitCodes:
    def test_config_error_is_2(self, workdir, capsys):
        bad = workdir / "bad.ini"
        # missing [dataset]/[model]; output_dir stays under the tmp tree
        bad.write_text(f"[experiment]\nname = x\noutput_dir = {workdir / 'o'}\n")
        assert main(["train", "--config", str(bad)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_config_file_is_2(self, workdir, capsys):
        assert main(["train", "--config", str(workdir / "none.ini")]) == 2

    def test_missing_checkpoint_dir_is_2(self, workdir, capsys):
        cfg = write_config(workdir, "nock.ini", out="x",
                           checkpoint=workdir / "never-created")
        assert main(["eval", "--config", str(cfg)]) == 2
        assert "checkpoint directory does not exist" in capsys.readouterr().err

    def test_train_ignores_unborn_checkpoint_path(self, workdir):
        # one config may name the checkpoint train is about to write
        cfg = write_config(workdir, "oneconf.ini", out="onerun",
                           checkpoint=workdir / "onerun" / "checkpoint")
        assert main(["train", "--config", str(cfg)]) == 0
        assert main(["eval", "--config", str(cfg), "--out", str(workdir / "oneeval")]) == 0

    def test_runtime_failure_is_1(self, workdir, capsys):
        empty = workdir / "emptyck"
        empty.mkdir()
        cfg = write_config(workdir, "brokeneval.ini", out="x", checkpoint=empty)
        assert main(["eval", "--config", str(cfg)]) == 1
        assert "error" in capsys.readouterr().err


def test_console_script_entry_point(workdir):
    cfg = write_config(workdir, "script.ini", out="scriptout",
                       extras="[bench]\ndims = 2,4,4\nsparsities = 0.5\nrepeats = 3\n")
    proc = subprocess.run([sys.executable, "-m", "pgate.cli", "bench",
                           "--config", str(cfg)],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert "wrote" in proc.stdout
