import json
import os

import pytest

from ddisearch import cli


TINY_SEARCH = {
    "num_layers": 2, "eta": 2, "dim": 8, "supernet_epochs": 1,
    "subsupernet_epochs": 1, "batch_size": 128, "search_steps": 3,
    "sample_size": 4, "hyper_steps": 1, "finetune_epochs": 1,
}
TINY_SYNTH = {"num_nodes": 40, "num_edges": 250}


def write_config(tmp_path, **extra):
    payload = {
        "output_dir": str(tmp_path / "run"),
        "master_seed": 0,
        "search": dict(TINY_SEARCH),
        "synth": dict(TINY_SYNTH),
    }
    payload.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload))
    return str(path)


def run(stage, config, *extra):
    return cli.main([stage, "--config", config, *extra])


class TestConfigLoading:
    def test_missing_config_is_usage_error(self, capsys):
        assert cli.main(["synth", "--config", "/nonexistent.json"]) == 1
        assert "not found" in capsys.readouterr().err

    def test_bad_json_reports_line(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text("{\n  broken\n}")
        assert cli.main(["synth", "--config", str(path)]) == 1
        assert "line 2" in capsys.readouterr().err

    def test_unknown_stage_is_usage_error(self, tmp_path):
        config = write_config(tmp_path)
        assert cli.main(["explode", "--config", config]) == 1

    def test_set_overrides_dotted_path(self, tmp_path):
        config = cli.load_config(write_config(tmp_path),
                                 ["search.dim=16", "master_seed=9"])
        assert config["search"]["dim"] == 16
        assert config["master_seed"] == 9

    def test_set_parses_json_values(self, tmp_path):
        config = cli.load_config(write_config(tmp_path),
                                 ["search.lr_range=[0.001, 0.01]",
                                  "search.task=multi_label"])
        assert config["search"]["lr_range"] == [0.001, 0.01]
        assert config["search"]["task"] == "multi_label"

    def test_set_without_equals(self, tmp_path):
        with pytest.raises(cli.UsageError):
            cli.load_config(write_config(tmp_path), ["search.dim"])

    def test_invalid_search_field_is_usage_error(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert run("split", config, "--set", "search.eta=9") == 1
        assert "invalid search config" in capsys.readouterr().err


class TestStageChain:
    def test_full_chain_and_artifacts(self, tmp_path):
        config = write_config(tmp_path)
        out = tmp_path / "run"
        for stage in ("synth", "ingest", "split", "supernet", "partition",
                      "subtrain", "search", "scopes", "finetune", "eval",
                      "report"):
            assert run(stage, config) == 0, stage
        report = json.loads((out / "report.json").read_text())
        assert report["winner"] in range(4)
        assert report["scopes_path"] == "scopes.tsv"
        assert "accuracy" in report["metrics"]["test"]
        hist = json.loads((out / "histogram.json").read_text())
        split = json.loads((out / "split.json").read_text())
        assert hist["num_decisions"] == sum(split["sizes"].values())
        # scope file lines match the histogram's distinct (u, v) pairs
        lines = [l for l in (out / "scopes.tsv").read_text().splitlines() if l]
        for line in lines:
            u, v, i, j = (int(x) for x in line.split("\t"))
            assert 1 <= i <= 2 and 1 <= j <= 2
        timings = (out / "timings.csv").read_text()
        assert "supernet" in timings and "finetune" in timings

    def test_missing_prerequisite_exits_2(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert run("split", config) == 2
        assert "missing prerequisite" in capsys.readouterr().err
        assert run("synth", config) == 0
        assert run("supernet", config) == 2  # split artifacts absent

    def test_report_refuses_stamp_mismatch(self, tmp_path, capsys):
        config = write_config(tmp_path)
        out = tmp_path / "run"
        for stage in ("synth", "split", "supernet", "partition", "subtrain",
                      "search", "scopes", "finetune"):
            assert run(stage, config) == 0
        assert run("report", config, "--set", "search.dim=16") == 1
        assert "mismatch" in capsys.readouterr().err
        # unchanged config still aggregates
        assert run("report", config) == 0

    def test_rerun_stage_is_byte_identical(self, tmp_path):
        config = write_config(tmp_path)
        out = tmp_path / "run"
        for stage in ("synth", "split", "supernet"):
            assert run(stage, config) == 0
        first = (out / "supernet.params").read_bytes()
        trace1 = (out / "supernet_loss.csv").read_bytes()
        assert run("supernet", config) == 0
        assert (out / "supernet.params").read_bytes() == first
        assert (out / "supernet_loss.csv").read_bytes() == trace1

    def test_lock_blocks_concurrent_use(self, tmp_path, capsys):
        config = write_config(tmp_path)
        out = tmp_path / "run"
        out.mkdir()
        (out / ".lock").touch()
        assert run("synth", config) == 1
        assert "locked" in capsys.readouterr().err
        (out / ".lock").unlink()
        assert run("synth", config) == 0
        assert not (out / ".lock").exists()  # released on success

    def test_lock_released_on_failure(self, tmp_path):
        config = write_config(tmp_path)
        assert run("split", config) == 2
        assert not (tmp_path / "run" / ".lock").exists()

    def test_output_root_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.ENV_OUTPUT_ROOT, str(tmp_path))
        payload = {"master_seed": 0, "search": dict(TINY_SEARCH),
                   "synth": dict(TINY_SYNTH)}
        path = tmp_path / "c.json"
        path.write_text(json.dumps(payload))
        assert cli.main(["synth", "--config", str(path)]) == 0
        assert (tmp_path / "ddisearch-run" / "triples.tsv").exists()


class TestGradcheckStage:
    def test_passes_and_writes_artifact(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert run("gradcheck", config) == 0
        payload = json.loads(
            (tmp_path / "run" / "gradcheck.json").read_text())
        assert payload["max_relative_error"] < 1e-5
        assert "gradcheck" in capsys.readouterr().out

    def test_helper_threshold(self):
        assert cli.run_gradcheck(seeds=(0,), dims=(4,)) < 1e-5
