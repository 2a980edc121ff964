import json
import os

import numpy as np
import pytest

from eirm.cli import ConfigError, load_config, main
from eirm.datasets import load_environment


def _write_config(tmp_path, **overrides):
    cfg = {
        "benchmark": "COLORED_SHAPES",
        "sizes": [120, 120, 120],
        "n_seeds": 1,
        "methods": ["F_IRM", "ERM"],
        "baseline_iters": 10,
        "train": {
            "hidden_dims": [8, 8],
            "repr_dim": 8,
            "phi_hidden_dims": [8],
            "dropout_rate": 0.0,
            "max_iters": 10,
            "termination": {"enabled": False},
        },
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_run_writes_expected_artifacts(tmp_path):
    cfg = _write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--out", str(out)]) == 0
    assert (out / "results.csv").exists()
    assert (out / "results.md").exists()
    assert (out / "manifest.json").exists()
    assert (out / "trace_F_IRM_seed0.csv").exists()
    assert (out / "trace_ERM_seed0.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [0]
    assert manifest["config"]["benchmark"] == "COLORED_SHAPES"
    assert manifest["wall_time_s"] > 0
    header = (out / "results.csv").read_text().splitlines()[0]
    assert header.startswith("method,train_acc_mean")


def test_run_traces_are_byte_identical_across_reruns(tmp_path):
    cfg = _write_config(tmp_path)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(cfg), "--out", str(out1)]) == 0
    assert main(["run", str(cfg), "--out", str(out2)]) == 0
    for name in ("trace_F_IRM_seed0.csv", "trace_ERM_seed0.csv", "results.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_run_seed_offset_changes_results(tmp_path):
    cfg = _write_config(tmp_path)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(cfg), "--out", str(out1)]) == 0
    assert main(["run", str(cfg), "--out", str(out2), "--seed-offset", "5"]) == 0
    t1 = (out1 / "trace_F_IRM_seed0.csv").exists()
    t2 = (out2 / "trace_F_IRM_seed5.csv").exists()
    assert t1 and t2


def test_config_validation_names_the_field(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"benchmark": "NOPE"}))
    with pytest.raises(ConfigError, match="benchmark"):
        load_config(path)
    path.write_text(json.dumps({"methods": ["MAGIC"]}))
    with pytest.raises(ConfigError, match="methods"):
        load_config(path)
    path.write_text(json.dumps({"train": {"learning": 1}}))
    with pytest.raises(ConfigError, match="train.learning"):
        load_config(path)
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(path)


def test_config_error_exit_code(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"benchmark": "NOPE"}))
    assert main(["run", str(path)]) == 2


def test_missing_idx_corpus_is_a_config_error(tmp_path, monkeypatch):
    monkeypatch.delenv("EIRM_DATA_DIR", raising=False)
    cfg = _write_config(tmp_path, benchmark="COLORED_DIGITS")
    with pytest.raises(ConfigError, match="data_dir"):
        load_config(cfg)


def test_preset_overrides_architecture(tmp_path):
    cfg = _write_config(tmp_path)
    loaded = load_config(cfg, preset="desk")
    assert loaded.train.hidden_dims == (64, 64)
    assert loaded.sizes == (2000, 2000, 2000)
    with pytest.raises(ConfigError, match="preset"):
        load_config(cfg, preset="galactic")


def test_gen_writes_loadable_caches(tmp_path, capsys):
    out = tmp_path / "cache"
    rc = main([
        "gen", "COLORED_SHAPES", "--sizes", "40", "40", "40",
        "--seed", "3", "--out", str(out),
    ])
    assert rc == 0
    names = sorted(os.listdir(out))
    assert names == [
        "COLORED_SHAPES_env0.eenv",
        "COLORED_SHAPES_env1.eenv",
        "COLORED_SHAPES_oracle.eenv",
        "COLORED_SHAPES_oracle_test.eenv",
        "COLORED_SHAPES_test.eenv",
    ]
    env = load_environment(out / "COLORED_SHAPES_env0.eenv")
    assert env.features.shape == (40, 16 * 16 * 3)
    assert env.flip_prob == 0.2


def test_theory_grid_exit_codes(capsys):
    assert main(["theory", "grid", "--c1", "0.5", "--c2", "0.5"]) == 0
    out = capsys.readouterr().out
    assert "equal=True" in out
    # a no-invariant-predictor instance still exits 0 with the finding shown
    assert main(["theory", "grid", "--c1", "0.0", "--c2", "1.0"]) == 0
    out = capsys.readouterr().out
    assert "no invariant predictor" in out


def test_theory_bounded_reports_fixed_point(capsys):
    assert main(["theory", "bounded", "--c1", "0.3", "--c2", "0.3"]) == 0
    assert "interior=True" in capsys.readouterr().out


def test_theory_grid_report_file(tmp_path):
    report = tmp_path / "grid.txt"
    assert main([
        "theory", "grid", "--c1", "0.5", "--c2", "0.5", "--report", str(report)
    ]) == 0
    text = report.read_text()
    assert "equal=True" in text
    assert "ne_pair_count=" in text
