import json
import shutil

import numpy as np
import pytest

from conftest import fixture_config
from nonergodic_eas.pipeline import (
    UNHASHED,
    ModelBundle,
    PipelineConfig,
    PipelineError,
    all_converged,
    run_pipeline,
    substream,
    summary_lines,
)
from nonergodic_eas.predict import condition_field


def test_bundle_layout(fixture_runs):
    a, _ = fixture_runs
    root = a.path
    for name in ("manifest.json", "grid.csv", "segments.csv", "ingest_report.json",
                 "smoothed_hyper.csv", "aleatory.json", "correlation.json", "run_log.json"):
        assert (root / name).is_file(), name
    assert len(list((root / "phase1").glob("*_draws.csv"))) == 3
    assert len(list((root / "phase2").glob("*_draws.csv"))) == 6
    assert len(list((root / "figures").glob("*.png"))) >= 8


def test_bundle_validates(fixture_runs):
    a, _ = fixture_runs
    loaded = ModelBundle.load(a.path)
    assert loaded.validate() == []
    assert sorted(loaded.fitted) == [0.5, 1.0, 2.5, 4.0, 7.0, 12.0]
    assert loaded.aleatory is not None
    assert loaded.smoothed is not None


def test_rerun_is_bit_identical(fixture_runs):
    a, b = fixture_runs
    assert a.manifest["bundle_hash"] == b.manifest["bundle_hash"]
    assert a.manifest["files"] == b.manifest["files"]
    assert a.manifest["config_hash"] == b.manifest["config_hash"]


def test_figures_and_logs_are_outside_the_hash(fixture_runs, tmp_path):
    a, _ = fixture_runs
    copy = tmp_path / "copy"
    shutil.copytree(a.path, copy)
    for png in (copy / "figures").glob("*.png"):
        png.write_bytes(b"not an image")
    (copy / "run_log.json").write_text("{}")
    assert ModelBundle.load(copy).validate() == []
    assert not any(k.split("/")[0] in UNHASHED for k in a.manifest["files"])


def test_tampering_is_detected(fixture_runs, tmp_path):
    a, _ = fixture_runs
    copy = tmp_path / "copy"
    shutil.copytree(a.path, copy)
    with open(copy / "smoothed_hyper.csv", "a") as fh:
        fh.write("\n")
    (copy / "extra.txt").write_text("x")
    problems = ModelBundle.load(copy).validate()
    assert "hash mismatch for smoothed_hyper.csv" in problems
    assert "unlisted file extra.txt" in problems


def test_posteriors_reload(fixture_runs):
    a, _ = fixture_runs
    post = a.posterior(2, 4.0)
    assert post.phase == 2 and post.freq == 4.0
    assert post.draws["phi0"].shape == (1, 30)


def test_convergence_reported(fixture_runs):
    a, _ = fixture_runs
    conv = a.manifest["converged"]
    assert set(conv) == {"phase1", "phase2"}
    assert len(conv["phase2"]) == 6
    lines = summary_lines(a)
    assert len(lines) == 1 + 3 + 6
    assert all_converged(a) == all(v for d in conv.values() for v in d.values())


def test_phase2_only_run_reuses_smoothing(fixture_runs, tmp_path):
    a, _ = fixture_runs
    cfg = fixture_config(tmp_path / "p2", phase="2", phase1_bundle=str(a.path), freqs=[1.0, 4.0],
                         figures=False)
    b = run_pipeline(cfg)
    assert sorted(b.fitted) == [1.0, 4.0]
    assert (tmp_path / "p2" / "smoothed_hyper.csv").read_bytes() == (a.path / "smoothed_hyper.csv").read_bytes()
    assert not (tmp_path / "p2" / "phase1").exists()
    assert not (tmp_path / "p2" / "figures").exists()
    assert ModelBundle.load(b.path).validate() == []


def test_failed_stage_writes_diagnostics(tmp_path):
    cfg = fixture_config(tmp_path / "bad", flatfile=str(tmp_path / "missing.csv"))
    with pytest.raises(PipelineError) as err:
        run_pipeline(cfg)
    assert err.value.stage == "ingest"
    diag = json.loads((tmp_path / "bad" / "diagnostics.json").read_text())
    assert diag["failed_stage"] == "ingest"
    assert diag["completed"] == []


def test_config_validation(tmp_path):
    with pytest.raises(ValueError, match="phase1_bundle"):
        fixture_config(tmp_path, phase="2")
    with pytest.raises(ValueError):
        fixture_config(tmp_path, freqs=[2.0, 1.0])
    with pytest.raises(ValueError):
        fixture_config(tmp_path, workers=0)
    with pytest.raises(ValueError, match="unknown config keys"):
        PipelineConfig.from_dict({"flatfile": "f", "c7": "c", "out_dir": "o", "bogus": 1})


def test_config_hash_ignores_output_location(tmp_path):
    a = fixture_config(tmp_path / "x")
    b = fixture_config(tmp_path / "y", workers=2, figures=False)
    assert a.hash() == b.hash()
    assert fixture_config(tmp_path / "x", seed=12).hash() != a.hash()


def test_config_round_trip(tmp_path):
    cfg = fixture_config(tmp_path, freqs=[1.0, 2.5])
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert PipelineConfig.load(path).hash() == cfg.hash()


def test_substreams():
    assert substream(0, "sampler", 1, 2.5) == substream(0, "sampler", 1, 2.5)
    seeds = {substream(0, "sampler", p, f) for p in (1, 2) for f in (0.5, 1.0, 2.5)}
    assert len(seeds) == 6
    assert all(0 <= s < 2**31 for s in seeds)
    assert substream(1, "sampler", 1, 2.5) != substream(0, "sampler", 1, 2.5)


def test_fitted_predictions_are_finite(fixture_runs):
    a, _ = fixture_runs
    pts = np.array([[360.0, 3760.0], [450.0, 3850.0]])
    c = condition_field(a.fitted[1.0].dc1as, pts, full_cov=False)
    assert np.all(np.isfinite(c.mean)) and np.all(c.sd > 0)
