import csv
import json

import pytest

from fed2sim.cli import main
from fed2sim.config import ConfigError, load_config, parse_config
from fed2sim.experiment import MANIFEST_FORMAT, run_experiment
from fed2sim.federation import RoundMetrics


def tiny_config(**over):
    cfg = {
        "seed": 3,
        "dataset": {"kind": "synthetic", "classes": 4, "train_per_class": 6, "test_per_class": 4,
                    "shape": [1, 4, 4], "separation": 2.0},
        "partition": {"kind": "nxc", "classes_per_client": 4},
        "model": {"widths": [4, 8], "fc": 8, "norm_groups": 2, "groups": 2, "shared_depth": 2},
        "federation": {"clients": 1, "rounds": 1, "batch_size": 8, "probe_batches": 1, "probe_batch_size": 4},
        "cost": {"sweep": {"D": [0, 1, 2]}},
    }
    for k, v in over.items():
        cfg[k] = {**cfg.get(k, {}), **v} if isinstance(v, dict) else v
    return cfg


def write_cfg(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


def test_single_client_smoke_run_writes_every_report(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", tiny_config())
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--out", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert names == {"metrics.csv", "feature_encoding.csv", "conflicts.csv", "heatmap.svg", "tv_profile.csv",
                     "cost_sweep.csv", "manifest.json"}
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 1 and list(rows[0]) == list(RoundMetrics.CSV_FIELDS)
    assert (out / "heatmap.svg").read_text().startswith("<svg")
    assert "final accuracy" in capsys.readouterr().out


def test_manifest_rerun_reproduces_metrics_bitwise(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", tiny_config(federation={"clients": 2, "rounds": 2},
                                                     partition={"classes_per_client": 2}))
    assert main(["run", str(cfg), "--out", str(tmp_path / "a")]) == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["format"] == MANIFEST_FORMAT and man["seed"] == 3
    assert main(["run", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_seed_flag_overrides_config(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", tiny_config())
    assert main(["run", str(cfg), "--out", str(tmp_path / "o"), "--seed", "11"]) == 0
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seed"] == 11
    assert main(["run", str(cfg), "--seed", str(2 ** 64)]) == 2


def test_output_dir_from_environment(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path / "c.json", tiny_config())
    monkeypatch.setenv("FED2SIM_OUT", str(tmp_path / "env"))
    assert main(["cost-sweep", str(cfg)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "env" / "cost_sweep.csv")))
    assert [float(r["value"]) for r in rows] == [0, 1, 2]


def test_invalid_config_reports_field_paths(tmp_path, capsys):
    bad = tiny_config(federation={"rounds": 0, "aggregation": "median"}, typo=1)
    cfg = write_cfg(tmp_path / "c.json", bad)
    assert main(["run", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "federation.rounds" in err and "federation.aggregation" in err and "typo" in err
    with pytest.raises(ConfigError, match="classes_per_client"):
        parse_config(tiny_config(partition={"classes_per_client": 9}))
    (tmp_path / "broken.json").write_text("{")
    assert main(["run", str(tmp_path / "broken.json")]) == 2


def test_cli_never_touches_inputs(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", tiny_config())
    before = cfg.read_bytes()
    main(["run", str(cfg), "--out", str(tmp_path / "o")])
    assert cfg.read_bytes() == before


# compare

FIELDS = ",".join(RoundMetrics.CSV_FIELDS)


def fixture(path, rows):
    path.write_text(FIELDS + "\n" + "\n".join(rows) + "\n")
    return path


def test_compare_hand_fixture(tmp_path):
    a = fixture(tmp_path / "a.csv", ["1,0.5,0.5,2.0,,,10", "2,0.625,0.6,1.5,,,20"])
    b = fixture(tmp_path / "b.csv", ["1,0.75,0.5,1.0,,,10", "2,0.5,0.6,,,,20"])
    assert main(["compare", str(a), str(b), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "compare.csv")))
    assert float(rows[0]["accuracy_delta"]) == 0.25 and float(rows[0]["alignment_delta"]) == -1.0
    assert float(rows[1]["accuracy_delta"]) == -0.125 and rows[1]["alignment_delta"] == ""


def test_compare_with_itself_is_zero(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", tiny_config(federation={"rounds": 2}))
    run_experiment(load_config(cfg), tmp_path / "r")
    m = tmp_path / "r" / "metrics.csv"
    assert main(["compare", str(m), str(m), "--out", str(tmp_path)]) == 0
    for r in csv.DictReader(open(tmp_path / "compare.csv")):
        assert float(r["accuracy_delta"]) == 0.0 and float(r["alignment_delta"]) == 0.0


def test_compare_errors(tmp_path, capsys):
    a = fixture(tmp_path / "a.csv", ["1,0.5,0.5,2.0,,,10"])
    b = fixture(tmp_path / "b.csv", ["1,0.5,0.5,2.0,,,10", "2,0.5,0.5,2.0,,,20"])
    assert main(["compare", str(a), str(b)]) == 2
    assert "round counts differ" in capsys.readouterr().err
    (tmp_path / "c.csv").write_text("round,accuracy\n1,0.5\n")
    assert main(["compare", str(a), str(tmp_path / "c.csv")]) == 2
    assert "missing columns" in capsys.readouterr().err


def test_blocks_may_omit_kind():
    cfg = parse_config({"dataset": {"classes": 4}, "partition": {"classes_per_client": 2}})
    assert cfg.dataset.kind == "synthetic" and cfg.partition.kind == "nxc"
    assert parse_config({"partition": {"kind": "dirichlet", "alpha": 0.5}}).partition.alpha == 0.5
