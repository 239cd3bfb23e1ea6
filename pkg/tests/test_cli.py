import json

import pandas as pd
import pytest

from nonergodic_eas.cli import EXIT_CONVERGENCE, EXIT_INVALID, EXIT_OK, main
from nonergodic_eas.validate import fixture_paths

FIX = fixture_paths()
DATA = ["--flatfile", str(FIX["flatfile"]), "--c7", str(FIX["c7"]), "--grid", str(FIX["grid"])]


def test_help_exits_cleanly(capsys):
    with pytest.raises(SystemExit) as err:
        main(["--help"])
    assert err.value.code == 0
    assert "crossval" in capsys.readouterr().out


def test_synth_fixture(tmp_path):
    assert main(["synth", "--fixture", "--out", str(tmp_path)]) == EXIT_OK
    df = pd.read_csv(tmp_path / "flatfile.csv")
    assert len(df) == 200
    assert json.loads((tmp_path / "c7.json").read_text())["1.0"] == -0.003


def test_synth_with_overrides(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_events": 4, "n_stations": 6, "p_record": 1.0, "r_max": 1e4}))
    assert main(["--seed", "3", "synth", "--spec", str(spec), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert len(pd.read_csv(tmp_path / "o" / "flatfile.csv")) == 24


def test_ingest(tmp_path, capsys):
    assert main(["ingest", *DATA, "--out", str(tmp_path)]) == EXIT_OK
    assert "records 200" in capsys.readouterr().out
    assert len(pd.read_csv(tmp_path / "records.csv")) == 200
    assert (tmp_path / "segments.csv").is_file()


def test_missing_input_is_invalid(tmp_path):
    code = main(["ingest", "--flatfile", str(tmp_path / "nope.csv"), "--c7", str(FIX["c7"]),
                 "--out", str(tmp_path)])
    assert code == EXIT_INVALID


def test_run_without_data_is_invalid(tmp_path):
    assert main(["run", "--out", str(tmp_path)]) == EXIT_INVALID


def test_run_with_bad_flatfile_is_invalid(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("event_id,station_id\n1,2\n")
    code = main(["run", "--flatfile", str(bad), "--c7", str(FIX["c7"]), "--out", str(tmp_path / "o")])
    assert code == EXIT_INVALID


def test_phase2_fit_needs_hyper(tmp_path):
    assert main(["fit", "--phase", "2", *DATA, "--out", str(tmp_path)]) == EXIT_INVALID


def test_unconverged_fit_exits_3(fixture_runs, tmp_path):
    a, _ = fixture_runs
    code = main(["fit", "--phase", "2", *DATA, "--freqs", "1", "--hyper", str(a.path / "smoothed_hyper.csv"),
                 "--chains", "1", "--warmup", "10", "--draws", "10", "--out", str(tmp_path)])
    assert code == EXIT_CONVERGENCE
    assert (tmp_path / "phase2_f1_summary.csv").is_file()
    assert (tmp_path / "fitted" / "fitted_f1.json").is_file()


def test_predict(fixture_runs, tmp_path, capsys):
    a, _ = fixture_runs
    out = tmp_path / "pred.csv"
    code = main(["predict", "--bundle", str(a.path), "--eq", "34.0", "-117.9", "--sta", "34.3", "-117.6",
                 "--mag", "5.5", "--out", str(out)])
    assert code == EXIT_OK
    df = pd.read_csv(out)
    assert list(df["freq"]) == [0.5, 1.0, 2.5, 4.0, 7.0, 12.0]
    assert (df["epistemic_sd"] > 0).all()
    assert (df["total_sigma"] > 0).all()


def test_map(fixture_runs, tmp_path):
    a, _ = fixture_runs
    out = tmp_path / "map.csv"
    assert main(["map", "--bundle", str(a.path), "--term", "dc1as", "--freq", "2.5", "--res", "20",
                 "--out", str(out)]) == EXIT_OK
    assert len(pd.read_csv(out)) > 0
    assert out.with_suffix(".png").is_file()


def test_map_unknown_frequency(fixture_runs, tmp_path):
    a, _ = fixture_runs
    code = main(["map", "--bundle", str(a.path), "--term", "dc1e", "--freq", "3.3",
                 "--out", str(tmp_path / "m.csv")])
    assert code == EXIT_INVALID


def test_sample_spectra(fixture_runs, tmp_path):
    a, _ = fixture_runs
    out = tmp_path / "spectra.csv"
    assert main(["--seed", "2", "sample-spectra", "--bundle", str(a.path), "--reference", "--n", "3",
                 "--out", str(out)]) == EXIT_OK
    df = pd.read_csv(out)
    assert len(df) == 4 * 3 * 6
    first = df.copy()
    assert main(["--seed", "2", "sample-spectra", "--bundle", str(a.path), "--reference", "--n", "3",
                 "--out", str(out)]) == EXIT_OK
    pd.testing.assert_frame_equal(pd.read_csv(out), first)


def test_correlate(fixture_runs, tmp_path):
    a, _ = fixture_runs
    assert main(["correlate", "--bundle", str(a.path), "--out", str(tmp_path / "corr.json")]) == EXIT_OK
    assert (tmp_path / "corr.json").is_file()


def test_crossval_needs_hyperparameters(tmp_path):
    assert main(["crossval", *DATA, "--freq", "1", "--out", str(tmp_path / "cv.json")]) == EXIT_INVALID


def test_smooth(fixture_runs, tmp_path):
    a, _ = fixture_runs
    out = tmp_path / "sm.csv"
    assert main(["smooth", "--phase1-dir", str(a.path / "phase1"), "--out", str(out)]) == EXIT_OK
    assert out.read_bytes() == (a.path / "smoothed_hyper.csv").read_bytes()
