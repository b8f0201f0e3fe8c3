import csv
import subprocess
import sys

import numpy as np
import pytest

from sparsedepth.depth_grid import DepthMap, density, read_depth, write_depth
from sparsedepth.harness.cli import main
from sparsedepth.harness.experiments import ExperimentResult
from sparsedepth.net import checkpoint

TINY = "channels=4,8\nheight=32\nwidth=32\ntrain_scenes=8\nbatch_size=4\nmax_steps=3\n"


def read_csv(path):
    raw = path.read_bytes()
    assert b"\r" not in raw
    return list(csv.reader(raw.decode().splitlines()))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Scene directory plus a trained depth and segmentation checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-scenes", "--count", "3", "--size", "32x32", "--classes", "4", "--seed", "1",
                 "--out", str(root / "scenes")]) == 0
    (root / "depth.cfg").write_text(TINY + "inputs=rgb+sd\nval_every=2\nval_scenes=2\n")
    (root / "seg.cfg").write_text(TINY + "task=seg\n")
    assert main(["train", "--config", str(root / "depth.cfg"), "--out", str(root / "d.ckpt")]) == 0
    assert main(["train", "--task", "seg", "--config", str(root / "seg.cfg"), "--out", str(root / "s.ckpt")]) == 0
    return root


class TestSparsify:
    def test_uniform(self, workdir, tmp_path):
        out = tmp_path / "sd.png"
        assert main(["sparsify", "--in", str(workdir / "scenes" / "00000_depth.png"), "--pattern", "uniform:0.1",
                     "--seed", "2", "--out", str(out)]) == 0
        assert 0.03 < density(read_depth(out)) < 0.2

    def test_rejects_sparse_source(self, workdir, tmp_path, capsys):
        sd = tmp_path / "sd.png"
        main(["sparsify", "--in", str(workdir / "scenes" / "00000_depth.png"), "--pattern", "uniform:0.1",
              "--out", str(sd)])
        assert main(["sparsify", "--in", str(sd), "--pattern", "uniform:0.5", "--out", str(tmp_path / "x.png")]) == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_bad_pattern(self, workdir, tmp_path):
        assert main(["sparsify", "--in", str(workdir / "scenes" / "00000_depth.png"), "--pattern", "gauss:1",
                     "--out", str(tmp_path / "x.png")]) == 1


class TestMaskAnalyze:
    def test_profile_csv(self, tmp_path):
        out = tmp_path / "m.csv"
        assert main(["mask-analyze", "--density", "0.3", "--layers", "3x3s1,3x3s1,3x3s2", "--trials", "20",
                     "--csv", str(out)]) == 0
        rows = read_csv(out)
        assert rows[0] == ["layer", "kernel", "stride", "density", "saturation_mean", "saturation_std"]
        assert [r[2] for r in rows[1:]] == ["1", "1", "2"]
        assert abs(float(rows[1][4]) - 0.9596) < 0.01


class TestGenScenes:
    def test_files(self, workdir):
        names = sorted(p.name for p in (workdir / "scenes").iterdir())
        assert names[:3] == ["00000_depth.png", "00000_labels.png", "00000_rgb.png"]
        assert "scenes.txt" in names


class TestTrain:
    def test_outputs(self, workdir):
        net, meta = checkpoint.load(workdir / "d.ckpt")
        assert tuple(net.slots) == ("rgb", "sd") and meta["steps"] == "3"
        assert (workdir / "d.ckpt.best").exists()
        rows = read_csv(workdir / "d.ckpt.loss.csv")
        assert rows[0] == ["step", "loss"] and len(rows) == 4

    def test_byte_identical_rerun(self, workdir, tmp_path):
        main(["train", "--config", str(workdir / "depth.cfg"), "--out", str(tmp_path / "again.ckpt")])
        assert (tmp_path / "again.ckpt").read_bytes() == (workdir / "d.ckpt").read_bytes()

    def test_unknown_key(self, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("lerning_rate=0.1\n")
        assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "x")]) == 1
        assert "unknown key" in capsys.readouterr().err


class TestEval:
    def test_depth(self, workdir, tmp_path):
        out = tmp_path / "e.csv"
        assert main(["eval", "--checkpoint", str(workdir / "d.ckpt"), "--data", str(workdir / "scenes"),
                     "--pattern", "uniform:0.05", "--csv", str(out)]) == 0
        rows = read_csv(out)
        assert rows[0][:5] == ["checkpoint", "pattern", "seed", "n_scenes", "mae_mm"]
        assert rows[1][:4] == ["d.ckpt", "uniform:0.05", "0", "3"]

    def test_segmentation(self, workdir, tmp_path):
        out = tmp_path / "e.csv"
        assert main(["eval", "--checkpoint", str(workdir / "s.ckpt"), "--data", str(workdir / "scenes"),
                     "--pattern", "lidar:64", "--csv", str(out)]) == 0
        assert read_csv(out)[0][4] == "mean_iou"


class TestComplete:
    def test_dense_output(self, workdir, tmp_path):
        sd = np.zeros((32, 32))
        sd[::5, ::5] = 12.0
        write_depth(tmp_path / "sd.png", DepthMap(sd))
        out = tmp_path / "done.png"
        assert main(["complete", "--checkpoint", str(workdir / "d.ckpt"), "--in-depth", str(tmp_path / "sd.png"),
                     "--in-rgb", str(workdir / "scenes" / "00000_rgb.png"), "--dmax", "90", "--out", str(out)]) == 0
        d = read_depth(out)
        assert density(d) == 1.0 and d.values.max() <= 90.0

    def test_missing_rgb(self, workdir, tmp_path):
        write_depth(tmp_path / "sd.png", DepthMap(np.ones((32, 32))))
        assert main(["complete", "--checkpoint", str(workdir / "d.ckpt"), "--in-depth", str(tmp_path / "sd.png"),
                     "--out", str(tmp_path / "x.png")]) == 1


class TestExperiments:
    @pytest.mark.parametrize("cmd,flag,values,cond", [("sweep-density", "--densities", "0.05,0.5", "density=0.05"),
                                                      ("ablate-lidar", "--layers", "8,64", "layers=8")])
    def test_table(self, workdir, tmp_path, cmd, flag, values, cond):
        out = tmp_path / "x.csv"
        args = [cmd, "--checkpoints", f"{workdir / 'd.ckpt'},baseline", flag, values, "--scenes", "2",
                "--size", "32x32", "--csv", str(out)]
        assert main(args) == 0
        rows = read_csv(out)
        assert tuple(rows[0]) == ExperimentResult.HEADER
        assert len(rows) == 5 and rows[1][1] == cond and rows[2][0] == "baseline"
        first = out.read_bytes()
        main(args)
        assert out.read_bytes() == first

    def test_scene_directory(self, workdir, tmp_path):
        out = tmp_path / "x.csv"
        assert main(["ablate-lidar", "--checkpoints", "baseline", "--layers", "64", "--data",
                     str(workdir / "scenes"), "--csv", str(out)]) == 0
        assert read_csv(out)[1][4] == "3"


class TestBaselineFill:
    def test_fill(self, tmp_path):
        sd = np.zeros((6, 6))
        sd[1, 1], sd[4, 4] = 3.0, 7.0
        write_depth(tmp_path / "sd.png", DepthMap(sd))
        assert main(["baseline-fill", "--in", str(tmp_path / "sd.png"), "--out", str(tmp_path / "f.png")]) == 0
        out = read_depth(tmp_path / "f.png").values
        assert out[0, 0] == 3.0 and out[5, 5] == 7.0 and density(DepthMap(out)) == 1.0

    def test_all_missing(self, tmp_path):
        write_depth(tmp_path / "sd.png", DepthMap(np.zeros((4, 4))))
        assert main(["baseline-fill", "--in", str(tmp_path / "sd.png"), "--out", str(tmp_path / "f.png")]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "sparsedepth", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "sweep-density" in res.stdout
