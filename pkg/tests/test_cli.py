import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from dclscam import datakit, evaluate
from dclscam.cli import main

FIXTURES = Path(__file__).parent / "fixtures"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    kv = {}
    for line in out.out.splitlines():
        key, _, value = line.partition("=")
        kv.setdefault(key, value)
    return code, kv, out


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    datakit.generate_shapes(40, 32, 3, 2, root / "data")
    return root


@pytest.fixture(scope="module")
def trained(tiny):
    ckpt = tiny / "m.ckpt"
    code = main(["train", "--arch", "dcls", "--data", str(tiny / "data"), "--epochs", "1",
                 "--batch-size", "20", "--out", str(ckpt)])
    assert code == 0
    return ckpt


class TestGen:
    def test_writes_manifest(self, tmp_path, capsys):
        code, kv, _ = run(capsys, "gen", "--n", 6, "--size", 16, "--classes", 2, "--seed", 1, "--out", tmp_path)
        assert code == 0 and kv["n"] == "6"
        assert Path(kv["manifest"]).exists()

    def test_class_choices(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as info:
            main(["gen", "--n", "2", "--classes", "7", "--out", str(tmp_path)])
        assert info.value.code == 2


class TestTrain:
    def test_outputs(self, trained, capsys):
        assert trained.exists()
        assert Path(str(trained) + ".json").exists()
        log = Path(str(trained) + ".trainlog.csv").read_text().splitlines()
        assert log[0] == "epoch,loss,train_top1,val_top1" and len(log) == 2
        cfg = json.loads(Path(str(trained) + ".json").read_text())
        assert cfg["arch"] == "dcls" and cfg["epochs"] == 1

    def test_reports_accuracy(self, tiny, capsys):
        code, kv, _ = run(capsys, "train", "--arch", "baseline", "--data", tiny / "data" / "manifest.jsonl",
                          "--epochs", 1, "--batch-size", 40, "--out", tiny / "b.ckpt")
        assert code == 0
        assert 0.0 <= float(kv["train_top1"]) <= 1.0 and 0.0 <= float(kv["val_top1"]) <= 1.0
        assert int(kv["params"]) > 0

    def test_config_file_with_override(self, tiny, capsys, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"arch": "starrelu", "epochs": 5, "widths": [4, 4, 4]}))
        code, kv, _ = run(capsys, "train", "--config", conf, "--epochs", 1, "--data", tiny / "data",
                          "--out", tmp_path / "s.ckpt")
        assert code == 0
        saved = json.loads((tmp_path / "s.ckpt.json").read_text())
        assert saved["arch"] == "starrelu" and saved["epochs"] == 1 and saved["widths"] == [4, 4, 4]

    def test_unknown_config_key(self, tiny, capsys, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"momentum": 0.9}))
        code, _, out = run(capsys, "train", "--config", conf, "--data", tiny / "data", "--out", tmp_path / "x")
        assert code == 2 and "momentum" in out.err

    def test_bad_manifest(self, tmp_path, capsys):
        (tmp_path / "manifest.jsonl").write_text('{"image": "missing.ppm", "heatmap": "h.pgm", "label": 0}\n')
        code, _, out = run(capsys, "train", "--data", tmp_path, "--out", tmp_path / "x.ckpt")
        assert code == 2 and "manifest.jsonl:1" in out.err

    def test_divergence_exit_code(self, tiny, capsys, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"clip_norm": 0.0, "lr_schedule": "constant"}))
        with np.errstate(over="ignore", invalid="ignore"):
            code, kv, out = run(capsys, "train", "--config", conf, "--lr", 1e30, "--epochs", 2, "--data",
                                tiny / "data", "--out", tmp_path / "d.ckpt")
        assert code == 3 and kv["status"] == "diverged" and int(kv["step"]) >= 1
        assert "diverged at step" in out.err
        assert not (tmp_path / "d.ckpt").exists()


class TestExplain:
    def test_cancellation_fixture(self, tmp_path, capsys):
        common = ["explain", "--ckpt", FIXTURES / "cancellation.ckpt", "--image", FIXTURES / "cancellation.ppm",
                  "--class", 0]
        code, kv, _ = run(capsys, *common, "--method", "gradcam", "--out", tmp_path / "g")
        assert code == 0 and kv["degenerate"] == "true" and kv["threshold"] == "none"
        assert np.all(datakit.read_pgm16(kv["heatmap"]) == 0)
        code, kv, _ = run(capsys, *common, "--out", tmp_path / "t")
        assert code == 0 and kv["degenerate"] == "false" and kv["method"] == "threshold_gradcam"
        assert kv["threshold"] == "0.3000"
        assert datakit.read_pgm16(tmp_path / "t.pgm").max() == 1.0
        overlay = datakit.read_image(tmp_path / "t_overlay.png")
        assert overlay.shape == (8, 8, 3)

    def test_bad_class(self, trained, tiny, capsys, tmp_path):
        code, _, out = run(capsys, "explain", "--ckpt", trained, "--image", tiny / "data/images/00000.ppm",
                           "--class", 3, "--out", tmp_path / "x")
        assert code == 2 and "out of range" in out.err

    def test_threshold_range(self, trained, tiny, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["explain", "--ckpt", str(trained), "--image", str(tiny / "data/images/00000.ppm"),
                  "--class", "0", "--threshold", "1.5", "--out", str(tmp_path / "x")])
        assert info.value.code == 2

    def test_missing_checkpoint(self, tiny, capsys, tmp_path):
        code, _, out = run(capsys, "explain", "--ckpt", tmp_path / "none.ckpt", "--image",
                           tiny / "data/images/00000.ppm", "--class", 0, "--out", tmp_path / "x")
        assert code == 2 and "cannot load checkpoint" in out.err


class TestScoreAndReport:
    def test_score_both_then_report(self, trained, tiny, capsys, tmp_path):
        code, kv, out = run(capsys, "score", "--ckpt", trained, "--data", tiny / "data", "--model-id", "tiny_dcls",
                            "--out", tmp_path / "s.csv")
        assert code == 0
        rows = evaluate.read_report_csv(tmp_path / "s.csv")
        assert [r["method"] for r in rows] == ["gradcam", "threshold_gradcam"]
        assert all(r["model"] == "tiny_dcls" and r["n_images"] == "40" for r in rows)
        assert "Threshold-Grad-CAM score" in out.err

        shutil.copy(tmp_path / "s.csv", tmp_path / "t.csv")
        text = (tmp_path / "t.csv").read_text().replace("tiny_dcls", "tiny")
        (tmp_path / "t.csv").write_text(text)
        code, kv, _ = run(capsys, "report", "--in", tmp_path / "t.csv", tmp_path / "s.csv", "--out",
                          tmp_path / "table.txt", "--csv", tmp_path / "all.csv", "--figures", tmp_path / "fig")
        assert code == 0 and kv["rows"] == "2"
        table = (tmp_path / "table.txt").read_text().splitlines()
        assert table[0].split()[0] == "Model" and len(table) == 4
        assert len(evaluate.read_report_csv(tmp_path / "all.csv")) == 4
        figs = sorted(p.name for p in (tmp_path / "fig").iterdir())
        assert figs == ["comparison_gradcam.png", "comparison_threshold_gradcam.png", "size_vs_score.png"]
        assert all((tmp_path / "fig" / f).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n" for f in figs)

    def test_score_val_split(self, trained, tiny, capsys, tmp_path):
        code, kv, _ = run(capsys, "score", "--ckpt", trained, "--data", tiny / "data", "--method", "tgradcam",
                          "--split", "val", "--out", tmp_path / "v.csv")
        assert code == 0 and kv["n_images"] == "4" and kv["method"] == "threshold_gradcam"

    def test_report_schema_mismatch(self, capsys, tmp_path):
        (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
        code, _, out = run(capsys, "report", "--in", tmp_path / "bad.csv")
        assert code == 2 and "schema mismatch" in out.err


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "dclscam", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen", "train", "explain", "score", "report"):
        assert cmd in res.stdout
