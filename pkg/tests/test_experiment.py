import csv
import json
import time

import numpy as np
import pytest

from sfmtl.cli import main
from sfmtl.errors import ConfigurationError
from sfmtl.experiment import RunConfig, load_config, run_experiment


def small(tmp_path, name="run", **kw):
    base = dict(rounds=2, n_clients=4, n_groups=2, samples_per_client=30, out=str(tmp_path / name), figures=False)
    base.update(kw)
    return RunConfig(**base)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_smoke_run_emits_every_artifact_kind(tmp_path):
    start = time.perf_counter()
    out = run_experiment(small(tmp_path, rounds=1, figures=True))
    assert time.perf_counter() - start < 5
    for name in ("rounds.csv", "summary.json", "manifest.json", "graph_round0000.csv", "anchors_round0000.csv"):
        assert (out / name).is_file(), name
    assert sorted(p.name for p in (out / "figures").iterdir()) == ["accuracy.png", "bits.png", "graph.png"]
    header = (out / "anchors_round0000.csv").read_text().splitlines()[0]
    assert header.startswith("client,class,v0,") and header.endswith(",v15")


def test_rounds_csv_and_accounting(tmp_path):
    cfg = small(tmp_path, rounds=3, sample_fraction=0.5)
    out = run_experiment(cfg)
    rows = read_rows(out / "rounds.csv")
    assert list(rows[0]) == ["round", "client", "accuracy", "loss", "bits_up", "bits_down", "community"]
    assert len(rows) == 3 * 2  # T rounds of |S| = 2 sampled clients
    summary = json.loads((out / "summary.json").read_text())
    assert summary["bits_up"] == sum(int(r["bits_up"]) for r in rows)
    per_client = 32 * (2 * 16 + 16 * 4 + 4)
    assert all(int(r["bits_up"]) == per_client for r in rows)
    assert summary["bits_up"] == 3 * 2 * per_client
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["sample_fraction"] == 0.5


def test_snapshot_cadence(tmp_path):
    out = run_experiment(small(tmp_path, rounds=5, snapshot_every=2))
    graphs = sorted(p.name for p in out.glob("graph_round*.csv"))
    assert graphs == ["graph_round0001.csv", "graph_round0003.csv", "graph_round0004.csv"]


def test_rerun_is_byte_identical(tmp_path):
    a = run_experiment(small(tmp_path, "a", rounds=3))
    b = run_experiment(small(tmp_path, "b", rounds=3, workers=3))
    for name in ("rounds.csv", "graph_round0002.csv", "anchors_round0002.csv", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_local_equals_sfmtl_without_collaboration(tmp_path):
    a = run_experiment(small(tmp_path, "local", method="local", rounds=3))
    b = run_experiment(small(tmp_path, "sf", method="sfmtl", lam=0.0, zero_graph=True, rounds=3))
    acc = lambda out: [r["accuracy"] for r in read_rows(out / "rounds.csv")]
    assert acc(a) == acc(b)


@pytest.mark.parametrize("method", ["fedavg", "fedu", "local"])
def test_baselines_run(tmp_path, method):
    out = run_experiment(small(tmp_path, method, method=method))
    summary = json.loads((out / "summary.json").read_text())
    assert 0 <= summary["fairness"]["mean"] <= 1
    if method == "local":
        assert summary["bits_up"] == 0


@pytest.mark.parametrize(
    "bad", [{"learning_rate": 0.0}, {"lam": -0.1}, {"alpha": 1.2}, {"rounds": 0}, {"method": "pfedme"}]
)
def test_config_validation(bad):
    with pytest.raises(ConfigurationError):
        RunConfig(**bad)


def test_load_config_merges_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"rounds": 7, "lam": 0.5, "seed": 1}))
    cfg = load_config(path, {"seed": 9, "method": None})
    assert (cfg.rounds, cfg.lam, cfg.seed, cfg.method) == (7, 0.5, 9, "sfmtl")
    path.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ConfigurationError, match="bogus"):
        load_config(path)


def test_unwritable_output_fails_before_compute(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        run_experiment(small(tmp_path, "file/sub"))


def test_cli_exit_codes_and_output(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"rounds": 2, "n_clients": 4, "n_groups": 2, "samples_per_client": 30}))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r"), "--no-figures"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "method,mean,std,worst_10,worst_20,bits_up,bits_down,flops"
    assert out[1].startswith("sfmtl,")
    assert main(["run", "--config", str(cfg), "--lam", "-1"]) == 2
    assert main(["stats", str(tmp_path / "r" / "rounds.csv")]) == 0
    assert capsys.readouterr().out.splitlines()[1].startswith("4,")
    assert main(["louvain", str(tmp_path / "r" / "graph_round0001.csv")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "node,community" and lines[-1].startswith("# Q = ")
    assert main(["oracle", str(tmp_path / "r" / "graph_round0001.csv")]) == 0


def test_cli_reports_numerical_abort(tmp_path, monkeypatch):
    import sfmtl.federation as fed
    from sfmtl.errors import NumericalError

    def explode(*args, **kwargs):
        raise NumericalError("non-finite gradient")

    monkeypatch.setattr(fed, "local_train", explode)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"rounds": 1, "n_clients": 4, "n_groups": 2, "samples_per_client": 30}))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r"), "--no-figures", "--method", "local"]) == 3


def test_cli_gen_data_bundle_runs(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dataset": "label_shift", "n_clients": 4, "samples_per_client": 30, "input_dim": 5}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "bundle"), "--seed", "3"]) == 0
    run = RunConfig(dataset="bundle", data_dir=str(tmp_path / "bundle"), rounds=1, out=str(tmp_path / "r"), figures=False)
    summary = json.loads((run_experiment(run) / "summary.json").read_text())
    assert len(summary["final_accuracy"]) == 4
    assert np.isfinite(summary["fairness"]["mean"])
