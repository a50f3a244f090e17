import json
from pathlib import Path

import pytest

from hipo.cli import main
from hipo.checkpoint import load_checkpoint
from hipo.mockllm import MockLLMServer
from hipo import llmclient as llc

MATRIX = {
    "beta": 0.1,
    "rows": [
        {"name": "A-only", "w_rq": 0.0, "w_mt": 0.0, "w_a": 1.0, "w_y": 0.0, "lr": 1e-3, "epochs": 1}
    ],
}

TINY_MODEL = ["--embed-dim", "16", "--n-layers", "1", "--n-heads", "2"]


@pytest.fixture()
def data_file(tmp_path):
    path = tmp_path / "train.jsonl"
    assert main(["gen-synthetic", "--n", "8", "--seed", "3", "--out", str(path)]) == 0
    return path


def write_matrix(tmp_path, obj=MATRIX):
    path = tmp_path / "matrix.json"
    path.write_text(json.dumps(obj))
    return path


class TestUsage:
    def test_top_level_help(self, capsys):
        assert main(["--help"]) == 0
        assert "gen-synthetic" in capsys.readouterr().out

    @pytest.mark.parametrize(
        "cmd", ["gen-synthetic", "augment", "train", "eval", "judge", "gradcheck", "oracle"]
    )
    def test_subcommand_help(self, cmd, capsys):
        assert main([cmd, "--help"]) == 0
        assert "--seed" in capsys.readouterr().out

    def test_unknown_flag(self):
        assert main(["gen-synthetic", "--n", "1", "--out", "x", "--bogus"]) == 1

    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required(self):
        assert main(["gen-synthetic", "--n", "4"]) == 1


class TestGenSynthetic:
    def test_zero_n(self, tmp_path):
        assert main(["gen-synthetic", "--n", "0", "--out", str(tmp_path / "x")]) == 1

    def test_bad_mode(self, tmp_path):
        assert (
            main(["gen-synthetic", "--n", "1", "--out", str(tmp_path / "x"), "--modes", "nope"]) == 1
        )

    def test_seeded_output_is_stable(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert main(["gen-synthetic", "--n", "6", "--seed", "5", "--out", str(a)]) == 0
        assert main(["gen-synthetic", "--n", "6", "--seed", "5", "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()


class TestTrain:
    def test_matrix_smoke(self, tmp_path, data_file):
        out = tmp_path / "run"
        code = main(
            ["train", "--data", str(data_file), "--out", str(out), "--seed", "1",
             "--matrix", str(write_matrix(tmp_path))] + TINY_MODEL
        )
        assert code == 0
        assert (out / "checkpoint" / "manifest.json").exists()
        assert (out / "reference" / "params.bin").exists()
        assert (out / "metrics.jsonl").exists()
        assert json.loads((out / "summary.json").read_text())["regimes"][0]["name"] == "A-only"
        load_checkpoint(out / "checkpoint")

    def test_unknown_regime(self, tmp_path, data_file):
        assert (
            main(["train", "--data", str(data_file), "--out", str(tmp_path / "o"),
                  "--regime", "does-not-exist"]) == 1
        )

    def test_regime_and_stepwise_conflict(self, tmp_path, data_file):
        assert (
            main(["train", "--data", str(data_file), "--out", str(tmp_path / "o"),
                  "--regime", "A-Only", "--stepwise"]) == 1
        )

    def test_bad_data_is_exit_2(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"prompt": "x"}\n')
        assert (
            main(["train", "--data", str(bad), "--out", str(tmp_path / "o"),
                  "--matrix", str(write_matrix(tmp_path))] + TINY_MODEL) == 2
        )

    def test_missing_data_file(self, tmp_path):
        assert (
            main(["train", "--data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o"),
                  "--matrix", str(write_matrix(tmp_path))] + TINY_MODEL) == 2
        )

    def test_independent_rows_write_subdirs(self, tmp_path, data_file):
        matrix = {
            "beta": 0.1,
            "rows": [
                {"name": "Rq-only", "w_rq": 1.0, "w_mt": 0.0, "w_a": 0.0, "w_y": 0.0, "lr": 1e-3, "epochs": 1},
                {"name": "Mt-only", "w_rq": 0.0, "w_mt": 1.0, "w_a": 0.0, "w_y": 0.0, "lr": 1e-3, "epochs": 1},
            ],
        }
        out = tmp_path / "multi"
        code = main(
            ["train", "--data", str(data_file), "--out", str(out), "--seed", "2",
             "--matrix", str(write_matrix(tmp_path, matrix))] + TINY_MODEL
        )
        assert code == 0
        assert (out / "Rq-only" / "checkpoint" / "params.bin").exists()
        assert (out / "Mt-only" / "checkpoint" / "params.bin").exists()
        assert json.loads((out / "summary.json").read_text())["mode"] == "independent"

    def test_stepwise_flag_threads_rows(self, tmp_path, data_file):
        matrix = {
            "beta": 0.1,
            "rows": [
                {"name": "first", "w_rq": 1.0, "w_mt": 0.0, "w_a": 0.0, "w_y": 0.0, "lr": 1e-3, "epochs": 1},
                {"name": "second", "w_rq": 0.0, "w_mt": 1.0, "w_a": 0.0, "w_y": 0.0, "lr": 1e-3, "epochs": 1},
            ],
        }
        out = tmp_path / "sw"
        code = main(
            ["train", "--data", str(data_file), "--out", str(out), "--seed", "2", "--stepwise",
             "--matrix", str(write_matrix(tmp_path, matrix))] + TINY_MODEL
        )
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert [r["name"] for r in summary["regimes"]] == ["first", "second"]

    def test_bundled_preset_name_resolves(self, tmp_path, data_file, capsys):
        out = tmp_path / "preset"
        code = main(
            ["train", "--data", str(data_file), "--out", str(out), "--seed", "1",
             "--regime", "A-Only"] + TINY_MODEL
        )
        assert code == 0  # paper-individual row at lr 1e-6


class TestEval:
    def test_eval_after_train(self, tmp_path, data_file):
        out = tmp_path / "run"
        main(["train", "--data", str(data_file), "--out", str(out), "--seed", "1",
              "--matrix", str(write_matrix(tmp_path))] + TINY_MODEL)
        report_path = tmp_path / "report.json"
        code = main(
            ["eval", "--ckpt", str(out / "checkpoint"), "--data", str(data_file),
             "--out", str(report_path), "--seed", "4", "--max-new", "8"]
        )
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["n_items"] == 8
        assert 0.0 <= report["accuracy"] <= 1.0

    def test_eval_missing_checkpoint(self, tmp_path, data_file):
        assert (
            main(["eval", "--ckpt", str(tmp_path / "none"), "--data", str(data_file),
                  "--out", str(tmp_path / "r.json")]) == 2
        )


class TestChecks:
    def test_oracle_ok(self, capsys):
        assert main(["oracle", "--cases", "5", "--seed", "2"]) == 0
        assert "within 1e-10" in capsys.readouterr().out

    @pytest.mark.slow
    def test_gradcheck_ok(self, capsys):
        assert main(["gradcheck", "--seed", "1", "--sample", "1"]) == 0
        out = capsys.readouterr().out
        assert "max relative error" in out


class TestClientCommands:
    def test_augment_and_judge_against_mock(self, tmp_path, monkeypatch):
        raw = tmp_path / "raw.jsonl"
        raw.write_text(
            "\n".join(
                json.dumps({"prompt": f"Question {i}?", "chosen": f"good {i}", "rejected": f"bad {i}"})
                for i in range(3)
            )
            + "\n"
        )
        with MockLLMServer() as server:
            monkeypatch.setenv(llc.ENV_ENDPOINT, server.url)
            monkeypatch.setenv(llc.ENV_MODEL, "mock-model")
            out = tmp_path / "aug.jsonl"
            assert main(["augment", "--data", str(raw), "--out", str(out),
                         "--backoff-base", "0.01"]) == 0
            assert len(out.read_text().splitlines()) == 3

            judge_in = tmp_path / "judge.jsonl"
            judge_in.write_text(
                "\n".join(
                    json.dumps({"problem": f"p{i}", "response": f"r{i}"}) for i in range(3)
                )
                + "\n"
            )
            scores = tmp_path / "scores.jsonl"
            summary = tmp_path / "radar.json"
            assert main(["judge", "--data", str(judge_in), "--out-scores", str(scores),
                         "--out-summary", str(summary), "--backoff-base", "0.01"]) == 0
            assert len(scores.read_text().splitlines()) == 3
            radar = json.loads(summary.read_text())
            assert radar["count"] == 3 and len(radar["means"]) == 9

    def test_augment_endpoint_down_is_exit_4(self, tmp_path, monkeypatch):
        raw = tmp_path / "raw.jsonl"
        raw.write_text(json.dumps({"prompt": "p", "chosen": "c", "rejected": "r"}) + "\n")
        monkeypatch.setenv(llc.ENV_ENDPOINT, "http://127.0.0.1:9/v1/chat/completions")
        monkeypatch.setenv(llc.ENV_MODEL, "mock-model")
        assert main(["augment", "--data", str(raw), "--out", str(tmp_path / "o"),
                     "--max-tries", "2", "--backoff-base", "0.01"]) == 4

    def test_judge_missing_env_is_exit_4(self, tmp_path, monkeypatch):
        monkeypatch.delenv(llc.ENV_ENDPOINT, raising=False)
        monkeypatch.delenv(llc.ENV_MODEL, raising=False)
        judge_in = tmp_path / "judge.jsonl"
        judge_in.write_text(json.dumps({"problem": "p", "response": "r"}) + "\n")
        assert main(["judge", "--data", str(judge_in), "--out-scores", str(tmp_path / "s"),
                     "--out-summary", str(tmp_path / "m")]) == 4

    def test_augment_bad_schema_is_exit_2(self, tmp_path, monkeypatch):
        raw = tmp_path / "raw.jsonl"
        raw.write_text(json.dumps({"prompt": "p", "chosen": "c"}) + "\n")
        with MockLLMServer() as server:
            monkeypatch.setenv(llc.ENV_ENDPOINT, server.url)
            monkeypatch.setenv(llc.ENV_MODEL, "mock-model")
            assert main(["augment", "--data", str(raw), "--out", str(tmp_path / "o")]) == 2
