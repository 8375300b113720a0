"""CLI contract: artifacts, exit codes, determinism, config hygiene."""

import json

import pytest

from cqec import controller
from cqec.cli import main


def _run(argv):
    return main(argv)


def test_run_single_flip_artifacts(tmp_path):
    code = _run(["run", "single-flip", "--qubit", "0", "--trajectories", "60",
                 "--seed", "7", "--out", str(tmp_path), "--workers", "2"])
    assert code == 0
    base = tmp_path / "single-flip"
    assert (base / "manifest.json").exists()
    assert (base / "summary.json").exists()
    assert (base / "single-flip.csv").exists()
    assert (base / "single-flip.svg").exists()
    summary = json.loads((base / "summary.json").read_text())
    assert summary["seed"] == 7
    assert "efficiency" in summary["metrics"]
    manifest = json.loads((base / "manifest.json").read_text())
    assert summary["manifest_hash"] == manifest["manifest_hash"]


def test_run_byte_identical_reruns(tmp_path):
    args = ["run", "single-flip", "--qubit", "1", "--trajectories", "40",
            "--seed", "3"]
    assert _run(args + ["--out", str(tmp_path / "a"), "--workers", "1"]) == 0
    assert _run(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    for name in ("summary.json", "single-flip.csv"):
        fa = (tmp_path / "a" / "single-flip" / name).read_bytes()
        fb = (tmp_path / "b" / "single-flip" / name).read_bytes()
        assert fa == fb


def test_dead_time_csv_one_row_per_delay(tmp_path):
    code = _run(["run", "dead-time", "--pair", "0,2", "--delays", "0:2000:500",
                 "--trajectories", "30", "--seed", "2", "--engine", "telegraph",
                 "--out", str(tmp_path), "--workers", "2"])
    assert code == 0
    rows = (tmp_path / "dead-time" / "dead-time.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 5  # header + delays 0,500,1000,1500,2000


def test_unknown_experiment_usage_error():
    with pytest.raises(SystemExit) as exc:
        _run(["run", "teleportation"])
    assert exc.value.code == 2


def test_invalid_config_exit_code(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"resonators": {"eta": [2.0, 0.5]}}))
    code = _run(["run", "distinguishability-scan", "--config", str(cfg),
                 "--out", str(tmp_path)])
    assert code == 3
    cfg2 = tmp_path / "unknown.json"
    cfg2.write_text(json.dumps({"resonators": {"oops": 1}}))
    assert _run(["params", "show", "--config", str(cfg2)]) == 3


def test_config_env_var(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "env.json"
    cfg.write_text(json.dumps({"resonators": {"nbar_odd": [3.25, 3.25]}}))
    monkeypatch.setenv("CQEC_CONFIG", str(cfg))
    assert _run(["params", "show"]) == 0
    out = capsys.readouterr().out
    doc = json.loads(out)
    assert doc["config"]["resonators"]["nbar_odd"] == [3.25, 3.25]
    assert doc["config_path"] == str(cfg)


def test_params_show_includes_derived(capsys):
    assert _run(["params", "show"]) == 0
    doc = json.loads(capsys.readouterr().out)
    derived = doc["derived"]
    assert len(derived["gamma_meas_rad_per_us"]) == 2
    assert derived["gamma_meas_rad_per_us"][0] > 0
    assert derived["sector_splittings_mhz"]["OO"] == pytest.approx(0.0)
    assert "tphi_us" in derived


def test_config_file_not_mutated(tmp_path):
    cfg = tmp_path / "cfg.json"
    payload = json.dumps({"resonators": {"nbar_odd": [1.5, 1.5]}})
    cfg.write_text(payload)
    _run(["run", "distinguishability-scan", "--config", str(cfg),
          "--out", str(tmp_path / "out")])
    assert cfg.read_text() == payload


def test_replay_cli_reproduces_golden(tmp_path, data_dir):
    code = _run(["replay", "--records", str(data_dir / "golden_records.csv"),
                 "--out", str(tmp_path)])
    assert code == 0
    produced = (tmp_path / "replay" / "events.csv").read_bytes()
    assert produced == (data_dir / "golden_events.csv").read_bytes()


def test_run_logical_t1_cli(tmp_path):
    code = _run(["run", "logical-t1", "--sector", "OO", "--feedback", "on",
                 "--horizon-us", "40", "--trajectories", "60",
                 "--engine", "telegraph", "--seed", "5", "--out", str(tmp_path),
                 "--workers", "2"])
    assert code == 0
    summary = json.loads((tmp_path / "logical-t1" / "summary.json").read_text())
    assert summary["metrics"]["sector"] == "OO"


def test_run_coherence_transfer_cli(tmp_path):
    code = _run(["run", "coherence-transfer", "--from-sector", "OO", "--flip", "0",
                 "--trajectories", "50", "--seed", "5", "--out", str(tmp_path),
                 "--workers", "2"])
    assert code == 0
    summary = json.loads((tmp_path / "coherence-transfer" / "summary.json").read_text())
    assert 0.0 <= summary["metrics"]["relative_coherence"] <= 1.5


def test_optimize_thresholds_cli(tmp_path):
    code = _run(["optimize-thresholds", "--trajectories-per-class", "30",
                 "--engine", "telegraph", "--seed", "2", "--out", str(tmp_path),
                 "--workers", "2"])
    assert code == 0
    summary = json.loads((tmp_path / "optimize-thresholds" / "summary.json").read_text())
    assert summary["metrics"]["theta1"] < summary["metrics"]["theta2"]


def test_manifest_written_before_compute(tmp_path, monkeypatch):
    # force the experiment itself to fail; the manifest must already exist
    import cqec.cli as cli_mod

    def boom(*a, **k):
        raise RuntimeError("forced failure")

    monkeypatch.setattr(cli_mod, "single_flip_experiment", boom)
    code = _run(["run", "single-flip", "--out", str(tmp_path), "--trajectories", "5"])
    assert code == 1
    assert (tmp_path / "single-flip" / "manifest.json").exists()
    assert not (tmp_path / "single-flip" / "summary.json").exists()


def test_records_of_a_run_replayable(tmp_path, params):
    # records exported from a trajectory feed the replay path end to end
    from cqec.trajectory import TrajectorySpec, run_batch

    spec = TrajectorySpec(duration_us=8.0, initial_state=0, injections=((2.0, 2),),
                          feedback_on=True, store_records=True)
    batch = run_batch(params, spec, 1, seed=77, engine="sme", workers=1)
    rec_path = tmp_path / "records.csv"
    controller.write_records_csv(rec_path, batch.records[0])
    assert _run(["replay", "--records", str(rec_path), "--out", str(tmp_path)]) == 0
    events = controller.read_events_csv(tmp_path / "replay" / "events.csv")
    assert any(e.kind == "detect_q2" for e in events)
