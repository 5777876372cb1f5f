"""End-to-end tests of the command-line interface."""

import json

import pytest

from srec.cli import main
from srec.events import ModelParams, read_event_csv, validate_log


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture()
def sim_csv(tmp_path, capsys):
    path = tmp_path / "events.csv"
    code, out, _ = run(
        capsys, "--seed", "3", "simulate", "--out", str(path),
        "--d", "2", "--k", "5",
        "--user-rate", "0.5", "--item-rate", "0.5",
        "--rating-rate", "3.0", "--horizon", "50",
        "--sigma2-e", "0.8", "--sigma2-u", "0.01", "--sigma2-v", "0.01",
    )
    assert code == 0 and "ratings=" in out
    return path


class TestSimulate:
    def test_writes_valid_event_csv(self, sim_csv):
        events = read_event_csv(sim_csv)
        assert validate_log(events, K=5).ok
        assert any(e.kind == "rate" for e in events)

    def test_deterministic_per_seed(self, tmp_path, capsys):
        paths = []
        for name in ("a.csv", "b.csv"):
            p = tmp_path / name
            code, _, _ = run(capsys, "--seed", "11", "simulate", "--out", str(p),
                             "--d", "2", "--k", "5", "--horizon", "30")
            assert code == 0
            paths.append(p)
        assert paths[0].read_text() == paths[1].read_text()

    def test_truth_output(self, tmp_path, capsys):
        p = tmp_path / "ev.csv"
        t = tmp_path / "truth.csv"
        code, _, _ = run(capsys, "simulate", "--out", str(p), "--truth-out",
                         str(t), "--d", "2", "--k", "5", "--horizon", "20")
        assert code == 0
        assert t.read_text().startswith("entity,kind,time,")


class TestIngest:
    def test_movielens_roundtrip(self, tmp_path, capsys):
        raw = tmp_path / "ratings.csv"
        raw.write_text(
            "userId,movieId,rating,timestamp\n"
            "1,31,2.5,1260759144\n"
            "1,1029,3.0,1260759179\n"
            "7,50,5.0,835355681\n"
        )
        out = tmp_path / "events.csv"
        code, text, _ = run(capsys, "ingest", "--input", str(raw), "--out", str(out))
        assert code == 0
        assert "ratings=3" in text and "users=2" in text and "K=10" in text
        events = read_event_csv(out)
        assert validate_log(events, K=10).ok

    def test_unknown_format_fails_with_json_error(self, tmp_path, capsys):
        code, out, err = run(capsys, "ingest", "--input", "x", "--out", "y",
                             "--format", "exotic")
        assert code == 1
        msg = json.loads(err)
        assert msg["error"] == "ValueError"


class TestStream:
    def test_stream_reports_and_snapshots(self, sim_csv, tmp_path, capsys):
        snap = tmp_path / "snap.csv"
        code, out, _ = run(capsys, "stream", "--events", str(sim_csv),
                           "--snapshot-out", str(snap), "--d", "2", "--k", "5")
        assert code == 0
        assert "batches=" in out and "ratings_per_s=" in out
        from srec.online import FilterState

        fs = FilterState.load_snapshot(snap)
        assert fs.params.d == 2
        fs.audit_sums()

    def test_missing_events_file_is_json_error(self, capsys):
        code, _, err = run(capsys, "stream", "--events", "/nonexistent.csv")
        assert code == 1
        assert json.loads(err)["error"] == "FileNotFoundError"


class TestTrain:
    def test_train_writes_params_and_trace(self, sim_csv, tmp_path, capsys):
        out = tmp_path / "params.txt"
        trace = tmp_path / "trace.csv"
        code, text, _ = run(capsys, "train", "--events", str(sim_csv),
                            "--out", str(out), "--trace", str(trace),
                            "--d", "2", "--k", "5", "--max-iters", "2",
                            "--tol", "0")
        assert code == 0
        assert "iterations=2" in text
        params = ModelParams.load(out)
        assert params.d == 2 and params.sigma2_E > 0
        assert trace.read_text().startswith("iter,")


class TestEval:
    def test_eval_emits_metrics_json(self, sim_csv, tmp_path, capsys):
        out = tmp_path / "metrics.json"
        code, text, _ = run(capsys, "eval", "--events", str(sim_csv),
                            "--out", str(out), "--d", "2", "--k", "5",
                            "--horizon", "2", "--repeats", "3",
                            "--star-step", "1.0")
        assert code == 0
        metrics = json.loads(out.read_text())
        assert metrics == json.loads(text)
        assert len(metrics["rmse_per_repeat"]) <= 3
        assert metrics["baseline_rmse"] > 0


class TestAnalyze:
    def test_corr_decay_from_snapshot(self, sim_csv, tmp_path, capsys):
        snap = tmp_path / "snap.csv"
        run(capsys, "stream", "--events", str(sim_csv),
            "--snapshot-out", str(snap), "--d", "2", "--k", "5")
        out = tmp_path / "curve.csv"
        code, text, _ = run(capsys, "analyze", "corr-decay", "--snapshot",
                            str(snap), "--side", "user", "--out", str(out))
        assert code == 0
        assert "half_time_days=" in text
        assert out.read_text().startswith("delta_days,correlation_sq")

    def test_trajectory_export(self, sim_csv, tmp_path, capsys):
        out = tmp_path / "traj.csv"
        code, text, _ = run(capsys, "analyze", "trajectories", "--events",
                            str(sim_csv), "--d", "2", "--k", "5",
                            "--pairs", "u0:i0", "--out", str(out))
        assert code == 0
        assert "series=" in text
        assert out.read_text().startswith("time,kind,entity_or_pair,dim,value")


class TestConfigFile:
    def test_config_supplies_defaults_flags_win(self, tmp_path, capsys):
        cfg = tmp_path / "conf"
        cfg.write_text("d=3\nk=5\nhorizon=20\n")
        out = tmp_path / "ev.csv"
        code, _, _ = run(capsys, "--config", str(cfg), "simulate",
                         "--out", str(out), "--k", "4")
        assert code == 0
        events = read_event_csv(out)
        levels = {e.level for e in events if e.kind == "rate"}
        assert levels <= set(range(1, 5))  # flag --k 4 beat config k=5
        assert max(e.time for e in events) <= 20.0  # config horizon applied

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "conf"
        cfg.write_text("banana=1\n")
        with pytest.raises(SystemExit):
            run(capsys, "--config", str(cfg), "simulate", "--out", "x")
