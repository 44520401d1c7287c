import csv
import json
import subprocess
import sys

import pytest

from prvipe.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, run
from prvipe.config import config_hash

SMALL = {"width": 16, "dim": 4, "batch_size": 16, "samples": 4, "steps": 5, "log_every": 0}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["gen-data", "--out", str(root / "data"), "--num-poses", "40", "--held-out", "10"]) == EXIT_OK
    (root / "small.json").write_text(json.dumps(SMALL))
    code = run(["train", "--out", str(root / "model"), "--dataset", str(root / "data" / "train.jsonl"),
                "--config", str(root / "small.json"), "--steps", "6"])
    assert code == EXIT_OK
    return root


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestUsage:
    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == EXIT_CONFIG
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self):
        assert run([]) == EXIT_CONFIG

    def test_missing_required_flag(self):
        assert run(["train", "--out", "x"]) == EXIT_CONFIG

    def test_missing_dataset_is_a_data_error(self, tmp_path):
        code = run(["train", "--out", str(tmp_path), "--dataset", str(tmp_path / "absent.jsonl")])
        assert code == EXIT_DATA

    def test_bad_config_value(self, tmp_path, workspace):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"steps": "lots"}))
        code = run(["train", "--out", str(tmp_path / "o"), "--dataset", str(workspace / "data" / "train.jsonl"),
                    "--config", str(bad)])
        assert code == EXIT_CONFIG

    def test_unknown_config_key(self, tmp_path, workspace):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"no_such_knob": 1}))
        code = run(["train", "--out", str(tmp_path / "o"), "--dataset", str(workspace / "data" / "train.jsonl"),
                    "--config", str(bad)])
        assert code == EXIT_CONFIG

    def test_malformed_dataset(self, tmp_path):
        data = tmp_path / "bad.jsonl"
        data.write_text("{oops\n")
        assert run(["train", "--out", str(tmp_path / "o"), "--dataset", str(data)]) == EXIT_DATA

    def test_console_script_module(self):
        proc = subprocess.run([sys.executable, "-c", "from prvipe.cli import main; main()", "bogus"],
                              capture_output=True, text=True)
        assert proc.returncode == EXIT_CONFIG


class TestPipeline:
    def test_gen_data_split(self, workspace):
        train = (workspace / "data" / "train.jsonl").read_text().splitlines()
        test = (workspace / "data" / "test.jsonl").read_text().splitlines()
        # header line plus four cameras per pose
        assert (len(train) - 1, len(test) - 1) == (30 * 4, 10 * 4)

    def test_train_outputs_and_precedence(self, workspace):
        model = workspace / "model"
        for name in ("config.json", "metrics.csv", "model.npz", "manifest.json"):
            assert (model / name).exists()
        manifest = json.loads((model / "manifest.json").read_text())
        assert manifest["config"]["steps"] == 6
        assert manifest["config"]["width"] == 16
        assert manifest["config_hash"] == config_hash(manifest["config"])
        assert set(manifest["versions"]) >= {"prvipe", "numpy", "scipy"}

    def test_eval_retrieval(self, workspace, capsys):
        out = workspace / "eval"
        code = run(["eval-retrieval", "--out", str(out), "--dataset", str(workspace / "data" / "test.jsonl"),
                    "--checkpoint", str(workspace / "model" / "model.npz"), "--samples", "4"])
        assert code == EXIT_OK
        assert "Hit@1=" in capsys.readouterr().out
        rows = _rows(out / "hits.csv")
        assert rows and all(0.0 <= float(v) <= 100.0 for r in rows for k, v in r.items() if k.startswith("hit"))
        assert (out / "manifest.json").exists()
        assert (out / "baseline_hits.csv").exists()
        bins = _rows(out / "confidence_bins.csv")
        assert sum(int(r["count"]) for r in bins) == sum(r["rank"] == "1" for r in _rows(out / "results.csv"))

    def test_eval_ambiguity_and_pca(self, workspace):
        args = ["--dataset", str(workspace / "data" / "test.jsonl"),
                "--checkpoint", str(workspace / "model" / "model.npz")]
        assert run(["eval-ambiguity", "--out", str(workspace / "amb"), "--neighbors", "3"] + args) == EXIT_OK
        assert len(_rows(workspace / "amb" / "ambiguity.csv")) == 10
        assert run(["pca-export", "--out", str(workspace / "pca")] + args) == EXIT_OK
        assert len(_rows(workspace / "pca" / "pca.csv")) == 40

    def test_sequence_commands(self, workspace):
        seq = workspace / "seq"
        assert run(["gen-data", "--kind", "sequences", "--out", str(seq)]) == EXIT_OK
        data = str(seq / "sequences.jsonl")
        ckpt = str(workspace / "model" / "model.npz")
        code = run(["align", "--out", str(workspace / "align"), "--dataset", data, "--checkpoint", ckpt,
                    "--query", "a0_i0", "--target", "a0_i1", "--samples", "2"])
        assert code == EXIT_OK
        pairs = _rows(workspace / "align" / "alignment.csv")
        assert pairs[0]["query_frame"] == "0" and pairs[0]["target_frame"] == "0"
        code = run(["classify", "--out", str(workspace / "cls"), "--dataset", data, "--index", data,
                    "--checkpoint", ckpt, "--samples", "2"])
        assert code == EXIT_OK
        assert len(_rows(workspace / "cls" / "predictions.csv")) == 12

    def test_unknown_sequence(self, workspace):
        seq = workspace / "seq2"
        run(["gen-data", "--kind", "sequences", "--out", str(seq)])
        code = run(["align", "--out", str(workspace / "align2"), "--dataset", str(seq / "sequences.jsonl"),
                    "--checkpoint", str(workspace / "model" / "model.npz"), "--query", "nope", "--target", "nope"])
        assert code == EXIT_DATA

    def test_gradcheck(self, tmp_path):
        assert run(["gradcheck", "--out", str(tmp_path)]) == EXIT_OK
        assert _rows(tmp_path / "gradcheck.csv")

    def test_gradcheck_failure_is_numeric(self, tmp_path):
        assert run(["gradcheck", "--out", str(tmp_path), "--tolerance", "0"]) == EXIT_NUMERIC
