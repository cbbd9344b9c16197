import json

import pytest

from kvswitch.cli import main
from kvswitch.config import ConfigError, build, default_config, set_by_path, validate


def write_config(tmp_path, overrides=None, name="config.json"):
    doc = {
        "seed": 7,
        "gpu_pool": {"total_blocks": 256, "initial_group_blocks": 40},
        "workload": {
            "num_conversations": 6,
            "think_time_mean_s": 2.0,
            "max_context_tokens": 2048,
        },
        "trace": {"pattern": "random", "frequency": 0.04},
    }
    if overrides:
        for key, value in overrides.items():
            node = doc
            parts = key.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = value
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


# -- config validation ----------------------------------------------------------


def test_defaults_build():
    settings = build(default_config())
    assert settings.engine.ablation == "full"
    assert settings.workload.num_conversations == 200


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="gpu_pool.total_blcoks"):
        validate({"gpu_pool": {"total_blcoks": 5}})


def test_bad_type_names_key():
    with pytest.raises(ConfigError, match="transfer.bandwidth_bytes_per_us"):
        validate({"transfer": {"bandwidth_bytes_per_us": "fast"}})


def test_negative_bandwidth_names_key():
    with pytest.raises(ConfigError, match="bandwidth"):
        build({"transfer": {"bandwidth_bytes_per_us": -5}})


def test_seed_fans_out_to_all_modules():
    settings = build({"seed": 99})
    assert settings.engine.gpu_pool.rng_seed == 99
    assert settings.engine.trace.seed == 99
    assert settings.workload.seed == 99


def test_set_by_path():
    doc = default_config()
    set_by_path(doc, "trace.frequency", 0.04)
    assert doc["trace"]["frequency"] == 0.04
    with pytest.raises(ConfigError, match="no such key"):
        set_by_path(doc, "trace.nonsense", 1)
    with pytest.raises(ConfigError, match="not a numeric key"):
        set_by_path(doc, "trace.pattern", 1)


# -- run ---------------------------------------------------------------------------


def test_run_writes_report(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "report.json"
    rc = main(["run", "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    report = json.loads(out.read_text())
    assert report["total_tokens"] == report["expected_tokens"]
    assert report["iterations"] > 0


def test_run_invalid_config_exits_1(tmp_path, capsys):
    cfg = write_config(tmp_path, {"transfer.bandwidth_bytes_per_us": -3})
    rc = main(["run", "--config", str(cfg)])
    assert rc == 1
    assert "bandwidth" in capsys.readouterr().err


def test_run_ablation_override(tmp_path):
    cfg = write_config(tmp_path, {"ablation": "full"})
    out = tmp_path / "r.json"
    rc = main(["run", "--config", str(cfg), "--ablation", "baseline", "--out", str(out)])
    assert rc == 0
    report = json.loads(out.read_text())
    assert report["avg_granularity_blocks"] in (0.0, 1.0)  # baseline forces 1-block ops


def test_run_does_not_mutate_config_file(tmp_path):
    cfg = write_config(tmp_path)
    before = cfg.read_text()
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "x.json")])
    assert cfg.read_text() == before


def test_run_csv_report(tmp_path):
    csv_path = tmp_path / "report.csv"
    cfg = write_config(tmp_path, {"output.report_csv": str(csv_path)})
    rc = main(["run", "--config", str(cfg), "--out", str(tmp_path / "r.json")])
    assert rc == 0
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "metric,value"
    assert any(line.startswith("overhead_ratio,") for line in lines)


# -- gen-trace -----------------------------------------------------------------------


def test_gen_trace_writes_jsonl(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "trace.jsonl"
    rc = main(["gen-trace", "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    lines = [l for l in out.read_text().splitlines() if l]
    assert len(lines) == 6


def test_gen_trace_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    a = tmp_path / "a.jsonl"
    b = tmp_path / "b.jsonl"
    assert main(["gen-trace", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["gen-trace", "--config", str(cfg), "--out", str(b)]) == 0
    assert a.read_text() == b.read_text()


def test_gen_trace_unwritable_path(tmp_path, capsys):
    cfg = write_config(tmp_path)
    rc = main(["gen-trace", "--config", str(cfg), "--out", "/proc/nope/trace.jsonl"])
    assert rc == 1


def test_run_from_ingested_trace(tmp_path):
    cfg = write_config(tmp_path)
    trace = tmp_path / "trace.jsonl"
    assert main(["gen-trace", "--config", str(cfg), "--out", str(trace)]) == 0
    cfg2 = write_config(tmp_path, {"workload.trace_path": str(trace)}, name="c2.json")
    out = tmp_path / "r.json"
    assert main(["run", "--config", str(cfg2), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["conversations"] == 6


# -- sweep ------------------------------------------------------------------------------


def test_sweep_emits_combined_csv(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "sweep.csv"
    rc = main([
        "sweep", "--config", str(cfg),
        "--param", "trace.frequency",
        "--values", "0.01,0.04",
        "--out", str(out),
    ])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("trace.frequency,")
    assert len(lines) == 3
    assert lines[1].split(",")[0] == "0.01"
    assert lines[2].split(",")[0] == "0.04"


def test_sweep_empty_values_exits_1(tmp_path, capsys):
    cfg = write_config(tmp_path)
    rc = main([
        "sweep", "--config", str(cfg),
        "--param", "trace.frequency",
        "--values", " ",
        "--out", str(tmp_path / "s.csv"),
    ])
    assert rc == 1


def test_sweep_non_numeric_param_exits_1(tmp_path):
    cfg = write_config(tmp_path)
    rc = main([
        "sweep", "--config", str(cfg),
        "--param", "trace.pattern",
        "--values", "1,2",
        "--out", str(tmp_path / "s.csv"),
    ])
    assert rc == 1
