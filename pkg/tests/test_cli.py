import json


from lstm_mhe.cli import main
from lstm_mhe.harness import RUN_COLUMNS, SERIES_COLUMNS


def test_simulate_then_report(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"duration": 3.0}))
    out = tmp_path / "res" / "run.csv"
    assert main(["simulate", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == 0
    assert tuple(out.read_text().splitlines()[0].split(",")) == RUN_COLUMNS
    assert len(out.read_text().splitlines()) == 31
    metrics = json.loads((tmp_path / "res" / "metrics.json").read_text())
    assert metrics["n_records"] == 30 and "timing" in metrics
    assert len((tmp_path / "res" / "timing.csv").read_text().splitlines()) == 31
    assert main(["report", "--in", str(out)]) == 0
    series = (tmp_path / "res" / "series.csv").read_text().splitlines()
    assert tuple(series[0].split(",")) == SERIES_COLUMNS and len(series) == 31


def test_missing_weights_is_validation_error(tmp_path, capsys):
    rc = main(["simulate", "--weights", str(tmp_path / "none.json"), "--out", str(tmp_path / "r.csv")])
    assert rc == 1
    assert "lstm-mhe train" in capsys.readouterr().err


def test_unknown_subcommand_and_bad_config(tmp_path, capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main([]) == 1
    bad = tmp_path / "b.json"
    bad.write_text(json.dumps({"duration": -1}))
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "r.csv")]) == 1
    bad.write_text("{not json")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "r.csv")]) == 1
    assert main(["report", "--in", str(tmp_path / "nothing.csv")]) == 1


def test_runtime_failure_exit_code(tmp_path, monkeypatch):
    import lstm_mhe.harness as harness

    def boom(*a, **k):
        raise RuntimeError("forced")

    monkeypatch.setattr(harness, "run_mil", boom)
    assert main(["simulate", "--out", str(tmp_path / "r.csv")]) == 2


def test_generate_and_train(tmp_path, capsys):
    data = tmp_path / "d.csv"
    assert main(["generate-data", "--cycles", "3", "--duration", "20", "--seed", "2", "--out", str(data)]) == 0
    assert data.exists()
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"max_epochs": 3, "mini_batch": 4}))
    weights = tmp_path / "w.json"
    report = tmp_path / "rep.json"
    rc = main(["train", "--data", str(data), "--config", str(cfg), "--out", str(weights), "--report", str(report)])
    assert rc == 0
    rep = json.loads(report.read_text())
    assert set(rep["metrics"]) == {"dtheta_w", "dtheta_r"}
    assert main(["train", "--data", str(tmp_path / "no.csv"), "--out", str(weights)]) == 1
    assert main(["generate-data", "--cycles", "0", "--out", str(data)]) == 1


def test_fault_test_command(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"duration": 6.0}))
    out = tmp_path / "f"
    rc = main(["fault-test", "--config", str(cfg), "--kind", "offset", "--t-start", "2", "--length", "2",
               "--out", str(out)])
    assert rc == 0
    report = json.loads((out / "fault.json").read_text())
    assert report["windows"][0]["kind"] == "offset"
    assert (out / "run.csv").exists()
    assert main(["fault-test", "--config", str(cfg), "--t-start", "5", "--length", "2", "--out", str(out)]) == 1
