import numpy as np
import pytest

from missgan.cli import ConfigError, build_parser, main, parse_config
from missgan.detector import auc, ideal_f1


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestParseConfig:
    def test_defaults(self):
        cfg = parse_config(None)
        assert cfg["lambda"] == 0.1
        assert cfg["lr"] == 0.001
        assert cfg["alpha"] == 0.1
        assert cfg["d_r"] == 6
        assert cfg["d_h"] == 100
        assert cfg["epochs"] == 16
        assert cfg["segmentation"] is True

    def test_file_then_flag_precedence(self, tmp_path):
        path = write(tmp_path / "c.cfg", "alpha = 0.2\nepochs = 4\n")
        cfg = parse_config(path)
        assert cfg["alpha"] == 0.2
        cfg = parse_config(path, {"alpha": "0.3"})
        assert cfg["alpha"] == 0.3
        assert cfg["epochs"] == 4

    def test_unknown_key_rejected(self, tmp_path):
        path = write(tmp_path / "c.cfg", "lambada = 0.1\n")
        with pytest.raises(ConfigError):
            parse_config(path)
        with pytest.raises(ConfigError):
            parse_config(None, {"lambada": "0.1"})

    def test_bool_and_type_coercion(self, tmp_path):
        path = write(tmp_path / "c.cfg", "segmentation = off\nd_h = 12\n")
        cfg = parse_config(path)
        assert cfg["segmentation"] is False
        assert cfg["d_h"] == 12
        with pytest.raises(ConfigError):
            parse_config(None, {"d_h": "twelve"})
        with pytest.raises(ConfigError):
            parse_config(None, {"segmentation": "maybe"})

    def test_comments_and_blank_lines(self, tmp_path):
        path = write(tmp_path / "c.cfg", "# comment\n\nlr = 0.01  # inline\n")
        assert parse_config(path)["lr"] == 0.01


class TestParser:
    def test_score_requires_checkpoint(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["score", "--data", "x.csv", "--out", "s.csv"])
        assert exc.value.code == 2

    def test_command_required(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([])
        assert exc.value.code == 2

    def test_missing_file_is_error_exit(self, tmp_path, capsys):
        rc = main(["eval", "--scores", str(tmp_path / "nope.csv")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestPipeline:
    def test_synth_train_score_eval(self, tmp_path, capsys):
        spec = write(tmp_path / "spec.cfg",
                     "ticks = 480\nseed = 9\nspike_rate = 0.02\nmislabel_rate = 0.05\n")
        data = str(tmp_path / "data.csv")
        assert main(["synth", "--spec", spec, "--out", data]) == 0

        ckpt = str(tmp_path / "model.ckpt")
        assert main(["train", "--data", data, "--out", ckpt,
                     "--l_init", "64", "--d_h", "8", "--d_r", "2",
                     "--max_scales", "1", "--epochs", "1",
                     "--hmm_states", "1", "--seg_em_iters", "5",
                     "--seg_refine_rounds", "1"]) == 0

        scores = str(tmp_path / "scores.csv")
        assert main(["score", "--checkpoint", ckpt, "--data", data,
                     "--out", scores, "--heatmap", str(tmp_path / "h.csv")]) == 0

        out = str(tmp_path / "metrics.txt")
        assert main(["eval", "--scores", scores, "--out", out]) == 0
        text = (tmp_path / "metrics.txt").read_text()
        metrics = dict(line.split("=", 1) for line in text.strip().split("\n"))

        # eval must reproduce the library metrics from the CSV exactly
        rows = np.genfromtxt(scores, delimiter=",", names=True)
        s, lab = rows["scaled_score"], rows["label"].astype(int)
        assert float(metrics["auc"]) == auc(s, lab)
        assert float(metrics["ideal_f1"]) == ideal_f1(s, lab).ideal_f1

        heat = (tmp_path / "h.csv").read_text().strip().split("\n")
        assert heat[0] == "tick,x0,x1"
        assert len(heat) == 481

    def test_segment_command(self, tmp_path):
        spec = write(tmp_path / "spec.cfg", "ticks = 320\nseed = 4\n")
        data = str(tmp_path / "data.csv")
        main(["synth", "--spec", spec, "--out", data])
        ckpt = str(tmp_path / "model.ckpt")
        main(["train", "--data", data, "--out", ckpt,
              "--l_init", "64", "--d_h", "8", "--d_r", "2",
              "--max_scales", "2", "--epochs", "1",
              "--hmm_states", "1", "--seg_em_iters", "5",
              "--seg_refine_rounds", "1"])
        out = str(tmp_path / "seg.csv")
        assert main(["segment", "--checkpoint", ckpt, "--data", data,
                     "--out", out]) == 0
        lines = (tmp_path / "seg.csv").read_text().strip().split("\n")
        assert lines[0].startswith("# T=320")
        start, length, regime = lines[1].split(",")
        assert start == "0"

    def test_eval_without_labels_fails(self, tmp_path, capsys):
        scores = write(tmp_path / "s.csv",
                       "tick,raw_score,scaled_score\n0,0.5,0.5\n1,0.7,1.0\n")
        assert main(["eval", "--scores", scores]) == 1
        assert "label" in capsys.readouterr().err
