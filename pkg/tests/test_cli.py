import hashlib
import json

import pytest

from attrseq.cli import main


def run(argv, capsys=None):
    code = main(argv)
    return code


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


GEN_TINY = ["gen-data", "--n-attr", "4", "--m", "2", "--d-region", "6", "--d-global", "6",
            "--n-train", "24", "--n-test", "8", "--noise-sigma", "0.2",
            "--correlation", "0.5", "--seed", "3"]

TINY_MODEL = ["--d", "8", "--embed-dim", "4", "--attn-width", "4", "--context-k", "1",
              "--dropout", "0.0"]


@pytest.fixture()
def tiny_data(tmp_path):
    out = tmp_path / "data"
    assert run(GEN_TINY + ["--out", str(out)]) == 0
    return out


class TestGenData:
    def test_deterministic_outputs(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert run(GEN_TINY + ["--out", str(a)]) == 0
        assert run(GEN_TINY + ["--out", str(b)]) == 0
        for name in ("train.jsonl", "test.jsonl", "vocab.json"):
            assert sha(a / name) == sha(b / name)

    def test_resolved_config_echoed(self, tmp_path, capsys):
        run(GEN_TINY + ["--out", str(tmp_path / "x")])
        out = capsys.readouterr().out
        assert "resolved config:" in out

    def test_preset_overrides_defaults(self, tmp_path, capsys):
        code = run(["gen-data", "--preset", "acceptance", "--seed", "1",
                    "--n-train", "12", "--n-test", "4", "--out", str(tmp_path / "p")])
        assert code == 0
        out = capsys.readouterr().out
        resolved = json.loads(out.split("resolved config: ")[1].split("\n")[0])
        assert resolved["n_attr"] == 12          # from the preset
        assert resolved["n_train"] == 12         # explicit flag wins


class TestExitCodes:
    def test_unknown_flag_is_validation_error(self, capsys):
        assert run(["gen-data", "--nope", "1"]) == 1

    def test_missing_manifest_is_io_error(self, tmp_path, capsys):
        code = run(["evaluate", "--manifest", str(tmp_path / "missing.json"),
                    "--data", str(tmp_path / "also-missing.jsonl"),
                    "--out", str(tmp_path / "out")])
        assert code == 2
        assert "not found" in capsys.readouterr().err

    def test_gradcheck_pass_and_fail_thresholds(self, capsys):
        args = ["gradcheck", "--d", "3", "--m", "2", "--n-attr", "3", "--d-region", "3",
                "--embed-dim", "2", "--attn-width", "2", "--seed", "7"]
        assert run(args) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "max relative error" in out
        assert run(args + ["--tolerance", "1e-12"]) == 1
        assert "FAIL" in capsys.readouterr().out


class TestHelp:
    def test_train_help_lists_paper_defaults(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        assert "--d" in text and "512" in text
        assert "--lr" in text and "0.0001" in text
        assert "--dropout" in text and "0.5" in text
        assert "--context-k" in text and "default: 2" in text
        assert "--m" in text and "default: 6" in text
        for flag in ("--data", "--vocab", "--out", "--seed", "--n-attr", "--embed-dim",
                     "--no-attention", "--no-context", "--epochs", "--batch", "--clip",
                     "--preset"):
            assert flag in text

    def test_predict_help_has_dump_attention(self, capsys):
        with pytest.raises(SystemExit):
            main(["predict", "--help"])
        assert "--dump-attention" in capsys.readouterr().out


class TestPipeline:
    def test_train_predict_evaluate_roundtrip(self, tiny_data, tmp_path, capsys):
        train_out = tmp_path / "member"
        code = run(["train", "--data", str(tiny_data / "train.jsonl"),
                    "--vocab", str(tiny_data / "vocab.json"),
                    "--out", str(train_out), "--epochs", "2", "--batch", "8",
                    "--lr", "0.003", "--seed", "1", "--order", "rare_first"] + TINY_MODEL)
        assert code == 0
        assert (train_out / "model.ckpt").exists()
        assert (train_out / "loss_log.csv").exists()
        assert (train_out / "loss_curve.png").exists()

        pred_out = tmp_path / "preds"
        code = run(["predict", "--checkpoint", str(train_out / "model.ckpt"),
                    "--data", str(tiny_data / "test.jsonl"),
                    "--vocab", str(tiny_data / "vocab.json"),
                    "--train-data", str(tiny_data / "train.jsonl"),
                    "--out", str(pred_out), "--dump-attention"])
        assert code == 0
        lines = (pred_out / "predictions.jsonl").read_text().strip().split("\n")
        assert len(lines) == 8
        record = json.loads(lines[0])
        assert set(record) >= {"id", "attributes", "labels"}
        att_text = (pred_out / "attention.csv").read_text()
        assert att_text.count("# id=") == 8
        first_block = att_text.split("# id=")[1].split("\n")
        assert "rows=2" in first_block[0]
        heatmaps = list(pred_out.glob("attention-*.png"))
        assert heatmaps

    def test_predict_context_model_requires_pool(self, tiny_data, tmp_path, capsys):
        train_out = tmp_path / "member"
        run(["train", "--data", str(tiny_data / "train.jsonl"),
             "--vocab", str(tiny_data / "vocab.json"),
             "--out", str(train_out), "--epochs", "1", "--batch", "8",
             "--seed", "1"] + TINY_MODEL)
        code = run(["predict", "--checkpoint", str(train_out / "model.ckpt"),
                    "--data", str(tiny_data / "test.jsonl"),
                    "--out", str(tmp_path / "p2")])
        assert code == 1
        assert "train-data" in capsys.readouterr().err

    def test_ensemble_and_evaluate(self, tiny_data, tmp_path, capsys):
        ens_out = tmp_path / "ens"
        code = run(["train-ensemble", "--data", str(tiny_data / "train.jsonl"),
                    "--vocab", str(tiny_data / "vocab.json"),
                    "--out", str(ens_out), "--epochs", "1", "--batch", "8",
                    "--seed", "5"] + TINY_MODEL)
        assert code == 0
        manifest = json.loads((ens_out / "manifest.json").read_text())
        assert len(manifest["members"]) == 10
        assert (ens_out / "loss_curves.png").exists()

        eval_out = tmp_path / "eval"
        code = run(["evaluate", "--manifest", str(ens_out / "manifest.json"),
                    "--data", str(tiny_data / "test.jsonl"),
                    "--vocab", str(tiny_data / "vocab.json"),
                    "--out", str(eval_out)])
        assert code == 0
        report = json.loads((eval_out / "report.json").read_text())
        assert set(report) == {"ensemble", "member_average", "members"}
        assert len(report["members"]) == 10
        table = (eval_out / "report.txt").read_text()
        assert "ensemble" in table and "member-average" in table
        assert (eval_out / "metrics.png").exists()
        assert (eval_out / "per_attribute_ap.csv").read_text().startswith("attribute,ap")

    def test_evaluate_finds_pool_from_manifest(self, tiny_data, tmp_path):
        ens_out = tmp_path / "ens"
        run(["train-ensemble", "--data", str(tiny_data / "train.jsonl"),
             "--vocab", str(tiny_data / "vocab.json"),
             "--out", str(ens_out), "--epochs", "1", "--batch", "8", "--seed", "5"]
            + TINY_MODEL)
        code = run(["evaluate", "--manifest", str(ens_out / "manifest.json"),
                    "--data", str(tiny_data / "test.jsonl"),
                    "--out", str(tmp_path / "eval2")])
        assert code == 0


class TestAblate:
    def test_ablation_battery_structure(self, tiny_data, tmp_path):
        out = tmp_path / "abl"
        code = run(["ablate", "--data", str(tiny_data / "train.jsonl"),
                    "--vocab", str(tiny_data / "vocab.json"),
                    "--test-data", str(tiny_data / "test.jsonl"),
                    "--out", str(out), "--epochs", "1", "--batch", "8",
                    "--seed", "2"] + TINY_MODEL)
        assert code == 0
        rows = (out / "ablation.csv").read_text().strip().split("\n")
        assert len(rows) == 5  # header + 4 ablations
        names = [r.split(",")[0] for r in rows[1:]]
        assert names == ["attribute_context", "similarity_context", "ensemble", "attention"]
        payload = json.loads((out / "ablation.json").read_text())
        assert len(payload) == 4
        for row in payload:
            for group in ("full", "ablated", "delta"):
                assert set(row[group]) == {"mAP_cls", "mPrc_ins", "mRcl_ins", "F1_ins"}
        assert (out / "ablation.png").exists()

    def test_robustness_protocol_structure(self, tiny_data, tmp_path):
        out = tmp_path / "rob"
        code = run(["ablate", "--robustness", "--data", str(tiny_data / "train.jsonl"),
                    "--vocab", str(tiny_data / "vocab.json"),
                    "--test-data", str(tiny_data / "test.jsonl"),
                    "--out", str(out), "--epochs", "1", "--batch", "8",
                    "--seed", "2"] + TINY_MODEL)
        assert code == 0
        rows = (out / "robustness.csv").read_text().strip().split("\n")
        assert rows[0] == "percent,n_train,mAP_cls,mPrc_ins,mRcl_ins,F1_ins"
        assert len(rows) == 5
        percents = [int(r.split(",")[0]) for r in rows[1:]]
        sizes = [int(r.split(",")[1]) for r in rows[1:]]
        assert percents == [100, 75, 50, 25]
        assert sizes == sorted(sizes, reverse=True) and len(set(sizes)) == 4
        assert (out / "robustness.png").exists()
