import json
import os

import numpy as np
import pytest

from sfsvi import cli
from sfsvi.config import load_config, parse_config
from sfsvi.errors import ConfigError
from sfsvi.io import atomic_write_text
from sfsvi.metrics import AccuracyMatrix

TOY = {
    "sequence": {"kind": "toy2d", "n_tasks": 2},
    "train": {"epochs": 1},
    "grid_resolution": 5,
}


def write_config(tmp_path, raw, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw, indent=2))
    return path


# parsing -----------------------------------------------------------------------


def test_defaults_resolve_by_sequence():
    toy = parse_config(json.dumps({"sequence": {"kind": "toy2d"}}))
    assert toy.method.train.epochs == 250 and toy.method.prior_v0 == 0.1
    assert toy.method.context.mode == "noise" and toy.method.context.noise_range == (-4.0, 4.0)
    sh = parse_config(json.dumps({"sequence": {"kind": "split_mnist", "head_mode": "single"}}))
    assert sh.method.coreset_capacity == 200 and sh.method.train.epochs == 80
    mh = parse_config(json.dumps({"sequence": {"kind": "split_mnist"}}))
    assert mh.method.coreset_capacity == 40 and mh.method.prior_v0 == 1e-3
    bare = parse_config(json.dumps({"sequence": {"kind": "split_mnist"}, "coreset": {"capacity": None}}))
    assert bare.method.context.mode == "current_task" and bare.method.prior_v0 == 100.0
    vcl = parse_config(json.dumps({"sequence": {"kind": "split_mnist", "head_mode": "single"}, "method": "vcl"}))
    assert vcl.method.coreset_capacity is None


def test_unknown_key_reports_its_line():
    text = '{\n  "sequence": {\n    "kind": "toy2d",\n    "bogus": 1\n  }\n}\n'
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == 4 and "sequence.bogus" in str(info.value) and str(info.value).startswith("line 4:")


def test_type_errors_and_invalid_json_report_lines():
    with pytest.raises(ConfigError, match=r"line 3: train\.epochs: expected an integer"):
        parse_config('{"sequence": {"kind": "toy2d"},\n "train": {\n   "epochs": "ten"}}')
    with pytest.raises(ConfigError) as info:
        parse_config('{\n "sequence": ,\n}')
    assert info.value.line == 2


@pytest.mark.parametrize(
    "raw",
    [
        {"sequence": {"kind": "permuted_mnist", "head_mode": "multi"}},
        {"sequence": {"kind": "split_mnist"}, "method": "vcl", "coreset": {"capacity": 40}},
        {"sequence": {"kind": "toy2d"}, "objective": {"kl_mode": "dense"}},
        {"sequence": {"kind": "toy2d"}, "train": {"epochs": 0}},
        {"train": {"epochs": 3}},
    ],
)
def test_invalid_configs_rejected(raw):
    with pytest.raises(ConfigError):
        parse_config(json.dumps(raw))


def test_round_trip_is_stable():
    raw = {
        "sequence": {"kind": "split_mnist", "head_mode": "multi", "subsample": 0.2},
        "coreset": {"capacity": 40, "policy": {"method": "kl", "direction": "highest"}},
        "objective": {"kl_mode": "full", "context_budget": 30},
        "seed": 7,
        "independent": True,
    }
    first = parse_config(json.dumps(raw))
    second = parse_config(first.to_json())
    assert first == second and first.to_json() == second.to_json()


def test_overrides(tmp_path):
    cfg = load_config(write_config(tmp_path, TOY)).with_overrides(seed=9, subsample=0.5)
    assert cfg.seed == 9 and cfg.sequence.seed == 9 and cfg.sequence.subsample == 0.5
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


# commands --------------------------------------------------------------------


def test_run_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.main(["run", "--config", str(write_config(tmp_path, TOY)), "--output-dir", str(out), "--quiet"])
    assert code == cli.EXIT_OK
    R = AccuracyMatrix.load(out / "R.csv")
    assert R.n_tasks == 2 and R.is_complete()
    for name in ("config.json", "logs.jsonl", "summary.json", "coreset.jsonl", "snapshots/task_2.json"):
        assert (out / name).is_file()
    assert sorted(p.name for p in (out / "heatmaps").iterdir()) == [
        "grid_task_1.csv", "grid_task_2.csv", "task_1.pgm", "task_2.pgm",
    ]
    assert not list(out.rglob("*.tmp"))
    summary = json.loads((out / "summary.json").read_text())
    assert {"mean_accuracy", "backward_transfer"} <= summary.keys()


def test_run_exit_codes(tmp_path):
    bad = write_config(tmp_path, {"sequence": {"kind": "toy2d", "extra": 1}}, "bad.json")
    assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_CONFIG
    nodata = write_config(
        tmp_path, {"sequence": {"kind": "split_mnist", "data_dir": str(tmp_path / "none")}}, "nodata.json"
    )
    assert cli.main(["run", "--config", str(nodata), "--quiet"]) == cli.EXIT_DATA


def test_verify_mutation_fails_fromp(capsys):
    code = cli.main(["verify", "--level", "quick", "--mutate"])
    out = capsys.readouterr().out
    assert code == cli.EXIT_VERIFY
    fromp = [line for line in out.splitlines() if "FROMP" in line]
    assert fromp and fromp[0].startswith("FAIL")


def test_verify_verdicts_stable_across_seeds(capsys):
    from sfsvi.verify import run_checks

    verdicts = {tuple(c.passed for c in run_checks("quick", seed)) for seed in range(10)}
    assert len(verdicts) == 1


def _fake_run(root, name, last_row, method="sfsvi"):
    d = root / name
    d.mkdir()
    rows = [[0.9], [0.9, last_row[1]]]
    rows[-1][0] = last_row[0]
    AccuracyMatrix.from_rows(rows).save(d / "R.csv")
    (d / "config.json").write_text(json.dumps({"method": method, "sequence": {"kind": "split_mnist", "head_mode": "multi"}, "coreset": {"capacity": 40}}))
    return d


def test_report_standard_errors(tmp_path, capsys):
    dirs = [_fake_run(tmp_path, f"r{i}", [a, a]) for i, a in enumerate((0.90, 0.92, 0.94))]
    assert cli.main(["report", *map(str, dirs), "--csv", str(tmp_path / "t.csv")]) == cli.EXIT_OK
    lines = (tmp_path / "t.csv").read_text().splitlines()
    acc, se = lines[1].split(",")[2:4]
    assert float(acc) == pytest.approx(0.92) and float(se) == pytest.approx(0.0115, abs=5e-5)


def test_report_single_and_identical_runs(tmp_path):
    assert cli.mean_and_se([0.9]) == (0.9, None)
    mean, se = cli.mean_and_se([0.93] * 10)
    assert mean == pytest.approx(0.93) and se == 0.0
    single = _fake_run(tmp_path, "only", [0.8, 0.9])
    rows = cli.summarize_runs([single])
    assert rows[0]["acc_se"] is None and cli._fmt(rows[0]["acc_se"]) == ""


def test_report_missing_matrix(tmp_path):
    (tmp_path / "empty").mkdir()
    assert cli.main(["report", str(tmp_path / "empty")]) == cli.EXIT_DATA


def test_atomic_write_leaves_old_file_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "R.csv"
    atomic_write_text(target, "old\n")

    def boom(*_):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write_text(target, "new\n")
    assert target.read_text() == "old\n"
    assert [p.name for p in tmp_path.iterdir()] == ["R.csv"]
