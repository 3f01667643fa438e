import json
import os

import pytest
import yaml

from closim.cli import main


def write_config(tmp_path, **over):
    cfg = {
        "cluster": {"leaves": 4, "spines": 8, "gpus_per_server": 4,
                    "ocs_count": 1},
        "strategies": ["best", "sr"],
        "schedulers": ["fifo"],
        "seeds": [0],
        "lambda_values": [40.0],
        "synth": {"count": 20, "mean_runtime_s": 300.0},
        "output_dir": str(tmp_path / "out"),
    }
    cfg.update(over)
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


class TestRunCommand:
    def test_sweep_writes_artifacts(self, tmp_path, capsys):
        cfgpath = write_config(tmp_path)
        rc = main(["run", str(cfgpath), "--workers", "1"])
        assert rc == 0
        out = tmp_path / "out"
        table = (out / "summary_table.csv").read_text().splitlines()
        assert table[0].startswith("strategy,scheduler,lambda,seed")
        assert len(table) == 3  # header + 2 cells
        for st in ("best", "sr"):
            tag = "%s_fifo_lam40_seed0" % st
            assert (out / ("jobs_%s.csv" % tag)).exists()
            summary = json.loads((out / ("summary_%s.json" % tag)).read_text())
            assert summary["strategy"] == st
            assert summary["schema_version"] == 1

    def test_json_output(self, tmp_path, capsys):
        cfgpath = write_config(tmp_path, strategies=["best"])
        rc = main(["run", str(cfgpath), "--workers", "1", "--json"])
        assert rc == 0
        rows = json.loads(capsys.readouterr().out)
        assert len(rows) == 1 and rows[0]["strategy"] == "best"

    def test_env_var_overrides_output_dir(self, tmp_path, capsys, monkeypatch):
        other = tmp_path / "elsewhere"
        monkeypatch.setenv("CLOSIM_OUTPUT_DIR", str(other))
        cfgpath = write_config(tmp_path, strategies=["best"])
        assert main(["run", str(cfgpath), "--workers", "1"]) == 0
        assert (other / "summary_table.csv").exists()

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump({"cluster": {}}))
        with pytest.raises(SystemExit):
            main(["run", str(path)])

    def test_malformed_yaml_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("{:::")
        with pytest.raises(SystemExit):
            main(["run", str(path)])

    def test_trace_file_input(self, tmp_path, capsys):
        trace = tmp_path / "trace.jsonl"
        assert main(["synth-trace", "--count", "15", "--lam", "40",
                     "--seed", "1", "--output", str(trace)]) == 0
        cfgpath = write_config(tmp_path, strategies=["best"],
                               trace=str(trace))
        assert main(["run", str(cfgpath), "--workers", "1"]) == 0
        tag = "best_fifo_lam40_seed0"
        csv = (tmp_path / "out" / ("jobs_%s.csv" % tag)).read_text()
        assert len(csv.strip().splitlines()) == 16


class TestCollisionsCommand:
    def test_csv_and_note(self, capsys):
        rc = main(["collisions", "--scales", "64", "--trials", "300",
                   "--seed", "1"])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.startswith("scale,count,fraction")
        assert "# P(contention) at 64 GPUs:" in out

    def test_json(self, capsys):
        rc = main(["collisions", "--scales", "64,256", "--trials", "200",
                   "--seed", "0", "--json"])
        assert rc == 0
        data = json.loads(capsys.readouterr().out)
        assert set(data) == {"64", "256"}

    def test_output_file(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("CLOSIM_OUTPUT_DIR", str(tmp_path))
        rc = main(["collisions", "--scales", "64", "--trials", "200",
                   "--output", "c.csv"])
        assert rc == 0
        assert (tmp_path / "c.csv").read_text().startswith("scale,count")


class TestVerifyCommand:
    @pytest.mark.parametrize("coll", ["ring", "hd", "alltoall"])
    def test_contention_free_collectives_pass(self, coll, capsys):
        rc = main(["verify", coll, "--n", "32", "--leaves", "4",
                   "--ranks-per-server", "8"])
        assert rc == 0
        assert "PASS" in capsys.readouterr().out

    def test_json_fields(self, capsys):
        rc = main(["verify", "ring", "--n", "16", "--leaves", "4", "--json"])
        assert rc == 0
        d = json.loads(capsys.readouterr().out)
        assert d["pass"] is True and d["leafwise"] is True
        assert d["max_contention"] <= 1

    def test_dbtree_exceeds_unit_contention(self, capsys):
        rc = main(["verify", "dbtree", "--n", "32", "--leaves", "4",
                   "--max-contention", "1"])
        assert rc == 1
        out = capsys.readouterr().out
        assert "FAIL" in out and "witness" in out

    def test_indivisible_rejected(self):
        with pytest.raises(SystemExit):
            main(["verify", "ring", "--n", "10", "--leaves", "4"])


class TestSynthTraceCommand:
    def test_stdout_jsonl(self, capsys):
        assert main(["synth-trace", "--count", "5", "--seed", "7"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 5
        rec = json.loads(lines[0])
        assert {"job_id", "arrival_time", "N"} <= set(rec)

    def test_deterministic(self, capsys):
        main(["synth-trace", "--count", "5", "--seed", "7"])
        a = capsys.readouterr().out
        main(["synth-trace", "--count", "5", "--seed", "7"])
        assert capsys.readouterr().out == a


def test_missing_subcommand_rejected():
    with pytest.raises(SystemExit):
        main([])
