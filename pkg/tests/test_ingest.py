import numpy as np
import pandas as pd
import pytest

from nonergodic_eas.ingest import (
    REQUIRED_COLUMNS,
    IngestError,
    ingest,
    read_c7,
    residual_columns,
)
from nonergodic_eas.validate import fixture_paths


def test_empty_flatfile_gives_empty_dataset():
    df = pd.DataFrame({c: [] for c in REQUIRED_COLUMNS} | {"res_f1": []})
    data, report = ingest(df, {1.0: -0.005})
    assert data.n_records == 0
    assert report.rows_in == 0
    assert data.seg.shape[0] == 0
    assert report.counts["events"] == 0


def test_single_record(one_record):
    _, data, report = one_record
    assert (report.counts["records"], report.counts["events"], report.counts["stations"]) == (1, 1, 1)
    assert data.seg.sum() == pytest.approx(30.0, rel=1e-12)
    assert data.residuals.tolist() == [[0.5]]
    assert data.c7.tolist() == [-0.005]


def test_swapped_coordinates_name_the_row(one_record):
    df = pd.concat([one_record[0]] * 3, ignore_index=True)
    df.loc[1, ["sta_lat", "sta_lon"]] = df.loc[1, ["sta_lon", "sta_lat"]].to_numpy()
    with pytest.raises(IngestError, match="row 2") as err:
        ingest(df, {1.0: -0.005})
    assert err.value.row == 2


def test_missing_column(one_record):
    with pytest.raises(IngestError, match="vs30"):
        ingest(one_record[0].drop(columns="vs30"), {1.0: -0.005})


def test_skip_mode_accounts_for_every_row(one_record):
    df = pd.concat([one_record[0]] * 4, ignore_index=True)
    df.loc[0, "mag"] = np.nan
    df.loc[2, "rrup_km"] = -1.0
    data, report = ingest(df, {1.0: -0.005}, on_error="skip")
    assert data.n_records + len(report.rejected) == report.rows_in == 4
    assert [r for r, _ in report.rejected] == [1, 3]
    assert list(data.record_id) == ["r2", "r4"]


def test_on_error_validated(one_record):
    with pytest.raises(ValueError):
        ingest(one_record[0], {1.0: -0.005}, on_error="ignore")


def test_blank_residual_marks_frequency_unusable(one_record):
    df = one_record[0].assign(res_f2=[np.nan])
    data, _ = ingest(df, {1.0: -0.005, 2.0: -0.006})
    assert data.freqs.tolist() == [1.0, 2.0]
    assert np.isnan(data.residuals[0, 1])


def test_residual_column_parsing():
    assert residual_columns(["res_f10", "mag", "res_f0.5"]) == {0.5: "res_f0.5", 10.0: "res_f10"}
    with pytest.raises(IngestError):
        residual_columns(["res_fabc"])


def test_c7_interpolated_in_log_frequency():
    out = read_c7({1.0: -0.004, 4.0: -0.008}, [1.0, 2.0, 4.0])
    np.testing.assert_allclose(out, [-0.004, -0.006, -0.008], rtol=1e-14)
    with pytest.raises(IngestError):
        read_c7({1.0: -0.004, 4.0: -0.008}, [8.0])
    with pytest.raises(IngestError):
        read_c7({}, [1.0])


def test_shipped_fixture_ingests_cleanly():
    p = fixture_paths()
    data, report = ingest(p["flatfile"], p["c7"])
    assert report.rejected == []
    assert data.n_records == 200
    assert len(data.freqs) == 6
    np.testing.assert_allclose(np.asarray(data.seg.sum(axis=1)).ravel(), data.rrup, rtol=1e-12)
