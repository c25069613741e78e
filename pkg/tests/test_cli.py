import json
import math

import numpy as np
import pandas as pd
import pytest

from src.idlewatch.cli import main
from src.idlewatch.cusum_detector import CusumConfig, CusumDetector
from src.idlewatch.sequential_stats import AmplitudeModel
from src.idlewatch.signal_model import UlaGeometry, project_many, steering_vector
from src.idlewatch.snapshot_io import read_iqsn


def _write_scenario(path, inr_db=None, theta_deg=0.0, seed=3):
    doc = {"schema_version": 1, "geometry": {"num_elements": 4}, "rng_seed": seed}
    if inr_db is not None:
        doc["interference"] = {"amplitude": 10.0 ** (inr_db / 20.0), "direction": math.radians(theta_deg)}
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def noise_file(tmp_path):
    scenario = _write_scenario(tmp_path / "h0.json")
    out = tmp_path / "h0.iqsn"
    assert main(["simulate", "--scenario", scenario, "--count", "1000", "--out", str(out)]) == 0
    return out


def test_simulate_writes_snapshots_and_sidecar(noise_file):
    assert read_iqsn(noise_file).shape == (1000, 4)
    sidecar = json.loads(noise_file.with_name("h0.iqsn.json").read_text())
    assert sidecar["count"] == 1000
    assert sidecar["scenario"]["geometry"]["num_elements"] == 4
    assert sidecar["sigma_I"] == 0.0


def test_simulate_records_linear_amplitude_for_db_flag(tmp_path):
    scenario = _write_scenario(tmp_path / "s.json", inr_db=5.0)
    out = tmp_path / "s.iqsn"
    assert main(["simulate", "--scenario", scenario, "--count", "10", "--out", str(out), "--inr-db", "-3"]) == 0
    sidecar = json.loads((tmp_path / "s.iqsn.json").read_text())
    assert sidecar["sigma_I"] == pytest.approx(10.0 ** -0.15, rel=1e-12)


def test_simulate_is_deterministic_given_seed(tmp_path):
    scenario = _write_scenario(tmp_path / "s.json", inr_db=2.0)
    for name in ("a.iqsn", "b.iqsn"):
        main(["simulate", "--scenario", scenario, "--count", "50", "--out", str(tmp_path / name), "--seed", "42"])
    assert np.array_equal(read_iqsn(tmp_path / "a.iqsn"), read_iqsn(tmp_path / "b.iqsn"))


def test_simulate_rejects_malformed_json(tmp_path, caplog):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema_version": 1,\n "noise_std": }')
    assert main(["simulate", "--scenario", str(bad), "--count", "5", "--out", str(tmp_path / "x.iqsn")]) == 1
    assert "line 2" in caplog.text
    assert not (tmp_path / "x.iqsn").exists()


def test_simulate_rejects_invalid_field(tmp_path, caplog):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 1, "noise_std": -1.0}))
    assert main(["simulate", "--scenario", str(bad), "--count", "5", "--out", str(tmp_path / "x.iqsn")]) == 1
    assert "noise_std" in caplog.text


def test_detect_noise_with_huge_threshold_reports_none(noise_file, tmp_path, capsys):
    out = tmp_path / "detect.csv"
    code = main(
        ["detect", "--in", str(noise_file), "--mode", "cusum", "--theta-deg", "0", "--inr-db", "3",
         "--threshold", "1000", "--out", str(out)]
    )
    assert code == 0
    assert "first alarm: none" in capsys.readouterr().out
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["k", "r", "g", "alarm"]
    assert len(frame) == 1000


def test_detect_cusum_requires_direction(noise_file, caplog):
    code = main(["detect", "--in", str(noise_file), "--mode", "cusum", "--inr-db", "3", "--threshold", "5"])
    assert code == 1
    assert "known interference direction" in caplog.text


def test_detect_reproduces_in_memory_pipeline(tmp_path, capsys):
    scenario = _write_scenario(tmp_path / "h1.json", inr_db=10.0, theta_deg=15.0)
    stream = tmp_path / "h1.iqsn"
    main(["simulate", "--scenario", scenario, "--count", "200", "--out", str(stream)])
    out = tmp_path / "detect.csv"
    code = main(
        ["detect", "--in", str(stream), "--theta-deg", "15", "--inr-db", "10", "--threshold", "5", "--out", str(out)]
    )
    assert code == 0
    frame = pd.read_csv(out)

    snapshots = read_iqsn(stream)
    r = np.abs(project_many(snapshots, steering_vector(UlaGeometry(num_elements=4), math.radians(15.0))))
    detector = CusumDetector(CusumConfig(model=AmplitudeModel.from_inr_db(10.0), threshold=5.0))
    expected = [detector.update(value).statistic for value in r[: len(frame)]]
    assert np.allclose(frame["g"], expected, rtol=1e-12, atol=1e-12)
    assert frame["alarm"].iloc[-1] == 1
    assert frame["k"].iloc[-1] <= 5
    assert f"first alarm: {frame['k'].iloc[-1]}" in capsys.readouterr().out


def test_detect_continual_lists_all_alarms(tmp_path, capsys):
    scenario = _write_scenario(tmp_path / "h1.json", inr_db=20.0)
    stream = tmp_path / "h1.iqsn"
    main(["simulate", "--scenario", scenario, "--count", "5", "--out", str(stream)])
    out = tmp_path / "detect.csv"
    main(["detect", "--in", str(stream), "--theta-deg", "0", "--inr-db", "20", "--threshold", "5",
          "--continual", "--out", str(out)])
    assert "alarms: 1 2 3 4 5" in capsys.readouterr().out


def test_detect_amplitude_csv(tmp_path, capsys):
    amplitudes = tmp_path / "amps.csv"
    pd.DataFrame({"r": [0.1, 0.2, 9.0, 0.3]}).to_csv(amplitudes, index=False)
    out = tmp_path / "detect.csv"
    assert main(["detect", "--in", str(amplitudes), "--mode", "sample", "--inr-db", "3", "--threshold", "5",
                 "--out", str(out)]) == 0
    assert "first alarm: 3" in capsys.readouterr().out


def test_detect_glr_reports_direction(tmp_path, capsys):
    scenario = _write_scenario(tmp_path / "h1.json", inr_db=20.0, theta_deg=-30.0, seed=8)
    stream = tmp_path / "h1.iqsn"
    main(["simulate", "--scenario", scenario, "--count", "20", "--out", str(stream)])
    out = tmp_path / "glr.csv"
    code = main(["detect", "--in", str(stream), "--mode", "glr", "--inr-db", "20", "--threshold", "50",
                 "--out", str(out)])
    assert code == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["k", "G", "theta_hat_deg", "alarm", "j_hat"]
    last = frame.iloc[-1]
    assert last["alarm"] == 1
    assert abs(last["theta_hat_deg"] + 30.0) < 5.0


def test_detect_glr_rejects_amplitude_csv(tmp_path):
    amplitudes = tmp_path / "amps.csv"
    amplitudes.write_text("r\n1.0\n")
    assert main(["detect", "--in", str(amplitudes), "--mode", "glr", "--inr-db", "3", "--threshold", "5"]) == 1


def test_doa_windows(tmp_path):
    scenario = _write_scenario(tmp_path / "h1.json", inr_db=10.0, theta_deg=40.0)
    stream = tmp_path / "h1.iqsn"
    main(["simulate", "--scenario", scenario, "--count", "300", "--out", str(stream)])
    out = tmp_path / "doa.csv"
    assert main(["doa", "--in", str(stream), "--window", "100", "--out", str(out)]) == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["window_start", "window_end", "theta_deg", "root_modulus"]
    assert frame["window_start"].tolist() == [1, 101, 201]
    assert frame["window_end"].tolist() == [100, 200, 300]
    assert np.all(np.abs(frame["theta_deg"] - 40.0) < 3.0)


def test_theorem1_table(tmp_path):
    out = tmp_path / "t1.csv"
    assert main(["theorem1", "--out", str(out)]) == 0
    frame = pd.read_csv(out)
    assert frame["sigma_db"].tolist() == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 8.0, 10.0]
    assert (frame["lower"] <= frame["inverse_information"]).all()
    assert (frame["inverse_information"] <= frame["upper"]).all()
    row = frame.set_index("sigma_db").loc[0.0]
    assert row["lower"] == pytest.approx(2.0)
    assert row["upper"] == pytest.approx(4.0)


def test_calibrate_rejects_zero_tolerance():
    code = main(["calibrate", "--target-neg-log-far", "3", "--tolerance", "0", "--inr-db", "1"])
    assert code == 1


def test_calibrate_prints_threshold(tmp_path, capsys):
    out = tmp_path / "h.json"
    code = main(["calibrate", "--target-neg-log-far", "2", "--inr-db", "3", "--trials", "500", "--seed", "4",
                 "--out", str(out)])
    assert code == 0
    result = json.loads(out.read_text())
    assert abs(result["neg_log_far"] - 2.0) <= 0.1
    assert json.loads(capsys.readouterr().out.strip()) == result


def test_sweep_command(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({
        "schema_version": 1, "detector": "cusum", "inr_db_list": [3.0], "threshold_list": [1.0],
        "trials": 100, "far_run_cap": 1000, "master_seed": 1,
    }))
    out = tmp_path / "results"
    assert main(["sweep", "--spec", str(spec), "--out", str(out), "--no-progress"]) == 0
    assert len(pd.read_csv(out / "results.csv")) == 1
    assert main(["sweep", "--spec", str(spec), "--out", str(out), "--no-progress", "--resume"]) == 0


def test_sweep_resume_with_changed_spec_is_usage_error(tmp_path, caplog):
    spec = tmp_path / "spec.json"
    document = {
        "schema_version": 1, "detector": "cusum", "inr_db_list": [3.0], "threshold_list": [1.0],
        "trials": 100, "far_run_cap": 1000, "master_seed": 1,
    }
    spec.write_text(json.dumps(document))
    out = tmp_path / "results"
    assert main(["sweep", "--spec", str(spec), "--out", str(out), "--no-progress"]) == 0
    spec.write_text(json.dumps({**document, "trials": 200}))
    assert main(["sweep", "--spec", str(spec), "--out", str(out), "--no-progress", "--resume"]) == 1
    assert "different sweep" in caplog.text


def test_missing_input_is_io_error(tmp_path):
    assert main(["doa", "--in", str(tmp_path / "nope.iqsn"), "--window", "10"]) == 3


def test_bad_flags_exit_with_usage_code():
    with pytest.raises(SystemExit) as exc:
        main(["detect", "--bogus"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1


def test_help_documents_units(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["detect", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert "dB" in text
    assert "degrees" in text
    assert "natural" in text
