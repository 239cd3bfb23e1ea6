import pandas as pd
import pytest

from helpers import small_data
from nonergodic_eas.ingest import ingest
from nonergodic_eas.model import prepare


@pytest.fixture(scope="session")
def small():
    data, syn = small_data(0)
    return data, syn, prepare(data, 1.0)


@pytest.fixture(scope="session")
def one_record():
    """A one-row flatfile and its ingested dataset."""
    row = {"event_id": "E1", "station_id": "S1", "mag": 4.5, "rrup_km": 30.0, "vs30": 400.0,
           "eq_lat": 34.0, "eq_lon": -118.0, "sta_lat": 34.2, "sta_lon": -118.1,
           "cls_lat": 34.0, "cls_lon": -118.0, "cls_depth_km": 8.0, "res_f1": 0.5}
    df = pd.DataFrame([row])
    data, report = ingest(df, {1.0: -0.005}, cell_size=25.0)
    return df, data, report


TINY_SAMPLER = {"chains": 1, "warmup": 30, "draws": 30, "max_tree_depth": 4}


def fixture_config(out_dir, **kw):
    from nonergodic_eas.pipeline import PipelineConfig
    from nonergodic_eas.validate import fixture_paths

    p = fixture_paths()
    base = dict(flatfile=str(p["flatfile"]), c7=str(p["c7"]), grid=str(p["grid"]),
                out_dir=str(out_dir), sampler=dict(TINY_SAMPLER), seed=11)
    base.update(kw)
    return PipelineConfig(**base)


@pytest.fixture(scope="session")
def fixture_runs(tmp_path_factory):
    """The shipped fixture run twice end to end with the same seed."""
    from nonergodic_eas.pipeline import run_pipeline

    root = tmp_path_factory.mktemp("bundles")
    a = run_pipeline(fixture_config(root / "a"))
    b = run_pipeline(fixture_config(root / "b"))
    return a, b


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
