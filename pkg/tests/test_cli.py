import csv
import json

import numpy as np
import pytest

from rkhsreg.cli import cli
from rkhsreg.features import EncoderWeights, save_weights
from rkhsreg.fileio import load_pose, read_ply, save_ply, save_pose
from rkhsreg.geometry import PointCloud, Pose, random_rotation


@pytest.fixture
def cloud_file(tmp_path):
    path = tmp_path / "a.ply"
    assert cli(["gen", "l_bracket", "--n", "300", "--seed", "1", "--out", str(path)]) == 0
    return path


def read_matrix(text):
    rows = [line.strip(" []") for line in text.splitlines() if line.lstrip().startswith("[")]
    return np.array([[float(v) for v in r.split()] for r in rows[:4]])


class TestGen:
    def test_writes_cloud(self, cloud_file):
        assert len(read_ply(cloud_file)) == 300

    def test_unknown_shape(self, tmp_path, capsys):
        assert cli(["gen", "teapot", "--out", str(tmp_path / "x.ply")]) == 2


class TestRegister:
    def test_identity(self, cloud_file, capsys, tmp_path):
        out = tmp_path / "pose.json"
        assert cli(["register", str(cloud_file), str(cloud_file), "--out", str(out)]) == 0
        np.testing.assert_allclose(read_matrix(capsys.readouterr().out), np.eye(4), atol=1e-6)
        np.testing.assert_allclose(load_pose(out).as_matrix(), np.eye(4), atol=1e-6)

    def test_recovers_pose(self, cloud_file, tmp_path, capsys):
        rng = np.random.default_rng(0)
        truth = Pose(random_rotation(rng, np.radians(10)), [0.02, 0, 0])
        src = tmp_path / "src.ply"
        save_ply(read_ply(cloud_file).transformed(truth.inverse()), src)
        truth_file = tmp_path / "truth.json"
        save_pose(truth_file, truth)
        out = tmp_path / "pose.json"
        assert cli(["register", str(src), str(cloud_file), "--truth", str(truth_file), "--out", str(out)]) == 0
        data = json.loads(out.read_text())
        assert data["rot_err_deg"] < 0.5
        assert "rot_err_deg" in capsys.readouterr().out

    def test_normalize_reports_original_frame(self, tmp_path):
        rng = np.random.default_rng(1)
        base = read_ply_cloud(tmp_path, rng)
        truth = Pose(random_rotation(rng, np.radians(8)), [0.3, -0.2, 0.1])
        tgt, src = tmp_path / "tgt.ply", tmp_path / "src.ply"
        save_ply(base, tgt)
        save_ply(base.transformed(truth.inverse()), src)
        out = tmp_path / "pose.json"
        assert cli(["register", str(src), str(tgt), "--normalize", "--out", str(out)]) == 0
        pose = load_pose(out)
        np.testing.assert_allclose(pose.apply(base.transformed(truth.inverse()).points), base.points, atol=0.05)
        assert "normalization" in json.loads(out.read_text())

    def test_encoder_mode(self, cloud_file, tmp_path):
        w = tmp_path / "w.bin"
        save_weights(EncoderWeights.random(channels=(4, 4), k=8), w)
        assert cli(["register", str(cloud_file), str(cloud_file), "--mode", "encoder", "--weights", str(w)]) == 0
        assert cli(["register", str(cloud_file), str(cloud_file), "--mode", "encoder"]) == 2

    def test_missing_file(self, tmp_path, capsys):
        assert cli(["register", str(tmp_path / "none.ply"), str(tmp_path / "none.ply")]) == 1
        assert "error" in capsys.readouterr().err

    def test_parse_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.ply"
        bad.write_text("nope\n")
        assert cli(["register", str(bad), str(bad)]) == 1
        assert "line 1" in capsys.readouterr().err


def read_ply_cloud(tmp_path, rng):
    # a shape far from the origin and larger than unit scale
    path = tmp_path / "base.ply"
    cli(["gen", "table", "--n", "400", "--seed", "2", "--out", str(path)])
    c = read_ply(path)
    return PointCloud(c.points * 3.0 + [5.0, -2.0, 1.0])


class TestUsage:
    def test_unknown_subcommand(self, capsys):
        assert cli(["frobnicate"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self, capsys):
        assert cli([]) == 2

    def test_help(self, capsys):
        assert cli(["--help"]) == 0

    def test_config_file(self, cloud_file, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"max-iters": 0, "ell0": 0.4}))
        assert cli(["register", str(cloud_file), str(cloud_file), "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "final_ell 0.4" in out and "iterations 0" in out
        # explicit flags win
        assert cli(["register", str(cloud_file), str(cloud_file), "--config", str(cfg), "--ell0", "0.2"]) == 0
        assert "final_ell 0.2" in capsys.readouterr().out

    def test_config_unknown_key(self, cloud_file, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        assert cli(["register", str(cloud_file), str(cloud_file), "--config", str(cfg)]) == 2
        assert "bogus" in capsys.readouterr().err


class TestBench:
    def test_ablation_kernel_rows(self, tmp_path, capsys):
        out = tmp_path / "report.csv"
        code = cli(["bench", "--preset", "ablation-kernel", "--trials", "5", "--shapes", "3", "--n-points", "128", "--out", str(out)])
        assert code == 0
        with open(out) as fh:
            rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
        assert len(rows) == 2 * 5
        assert {r["method"] for r in rows} == {"rbf_tanh", "rbf"}
        assert "rbf_tanh" in capsys.readouterr().out


class TestTrain:
    def test_train_writes_weights(self, tmp_path, capsys):
        data = tmp_path / "data"
        data.mkdir()
        for i, kind in enumerate(("box", "l_bracket", "table")):
            assert cli(["gen", kind, "--n", "200", "--seed", str(i), "--out", str(data / f"{kind}.ply")]) == 0
        (data / "notes.md").write_text("ignored")
        w, log = tmp_path / "w.bin", tmp_path / "log.csv"
        code = cli(["train", str(data), "--curriculum", "1,10", "--epochs", "1", "--n-points", "64", "--batch", "2", "--out", str(w), "--log", str(log)])
        assert code == 0
        assert w.exists() and len(log.read_text().splitlines()) == 3
        assert "val_rot_err_deg" in capsys.readouterr().out

    def test_empty_dir(self, tmp_path):
        assert cli(["train", str(tmp_path)]) == 1
