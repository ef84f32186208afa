import json

import pytest

from bosa import dataset, density, harness
from bosa.cli import main


@pytest.fixture
def config(tmp_path):
    cfg = harness.ExperimentConfig(
        output_dir=str(tmp_path / "exp"),
        target_data={"tier": "medium", "n": 800, "seed": 1},
        source_data={"tier": "medium", "n": 800, "seed": 2},
        target_fraction=0.5,
        density={"hidden_dim": 8, "iterations": 10, "ensemble_size": 2},
        agent={"hidden_dim": 8, "batch_size": 32},
        steps=4,
        eval_episodes=1,
        seeds=[0],
    )
    return harness.dump_config(cfg, tmp_path / "exp.yaml")


def test_data_density_augment_chain(tmp_path):
    t, s, m = tmp_path / "t.bin", tmp_path / "s.bin", tmp_path / "m.bin"
    assert main(["gen-data", "--n", "600", "--seed", "1", "--out", str(t)]) == 0
    assert main(["gen-data", "--n", "400", "--seed", "2", "--mass-scale", "0.5", "--tag", "source", "--out", str(s)]) == 0
    assert main(["mix", "--target", str(t), "--source", str(s), "--out", str(m)]) == 0
    assert dataset.OfflineDataset.load(m).tag_counts() == {"target": 600, "source": 400, "generated": 0}

    assert main(["train-density", "--data", str(m), "--iterations", "5", "--hidden", "8", "--out", str(tmp_path / "beh")]) == 0
    assert density.load_cvae(tmp_path / "beh", "behavior").meta["role"] == "behavior"
    assert main(["train-density", "--data", str(t), "--role", "transition", "--k", "2", "--iterations", "5", "--hidden", "8", "--out", str(tmp_path / "ens")]) == 0
    assert len(density.load_ensemble(tmp_path / "ens").members) == 2

    g = tmp_path / "g.bin"
    assert main(["augment", "--mode", "noise", "--data", str(t), "--n", "100", "--amplitude", "0.1", "--out", str(g)]) == 0
    assert dataset.OfflineDataset.load(g).tag_counts()["generated"] == 100
    assert main(["augment", "--mode", "model", "--data", str(t), "--n", "50", "--model-budget", "5", "--hidden", "8", "--out", str(g)]) == 0
    assert dataset.OfflineDataset.load(g).meta["budget"] == 5


def test_train_and_report(tmp_path, config):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--variant", "no-filter", "--out", str(out)]) == 0
    res = json.loads((out / "eval.json").read_text())
    assert res["variant"] == "no-filter" and len(res["returns"]) == 1
    assert (out / "final").exists() and (out / "diagnostics.csv").exists()
    assert main(["report", "--runs", str(tmp_path / "run"), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "report.csv").exists()
    assert main(["report", "--runs", str(tmp_path / "empty"), "--out", str(tmp_path / "rep")]) == 1


def test_run_and_resume(tmp_path, config, capsys):
    assert main(["run", "--config", str(config)]) == 0
    assert main(["run", "--config", str(config), "--resume"]) == 0
    assert "misses 0" in capsys.readouterr().out


def test_run_stage_failure_exit_code(tmp_path, config, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("nope")

    monkeypatch.setattr(harness.density, "fit_behavior", boom)
    assert main(["run", "--config", str(config)]) == 2


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
