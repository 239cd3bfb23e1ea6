import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nonergodic_eas.ifcorr import (
    REFERENCE_MODELS,
    CorrelationFitError,
    CorrelationModel,
    EmpiricalCorr,
    correlation_matrix,
    empirical_correlations,
    empirical_rho,
    eval_correlation,
    fisher_z,
    fit_correlation_model,
    load_models,
    repair_psd,
    sample_correlated_terms,
    save_models,
)

CHECK_FR = np.array([0.1, 0.5, 1.0, 2.0])
FREQS = np.exp(np.linspace(np.log(0.1), np.log(25.0), 60))
PAIRS = np.array(list(itertools.combinations(FREQS, 2)))
PAIR_FR = np.abs(np.log(PAIRS[:, 0] / PAIRS[:, 1]))


def z_data(model, noise=0.0, seed=0):
    """Fisher-z pairs drawn from ``model``; n = 403 gives a 0.05 standard error."""
    rng = np.random.default_rng(seed)
    z = model.z_curve(PAIR_FR) + rng.normal(0.0, noise, len(PAIR_FR))
    return EmpiricalCorr(PAIRS[:, 0], PAIRS[:, 1], np.tanh(z), np.full(len(z), 403.0))


def test_rho_identical_and_opposite():
    x = np.array([0.3, -1.2, 2.0, 0.7, 5.0])
    assert empirical_rho(x, x) == pytest.approx(1.0)
    assert empirical_rho(x, -x) == pytest.approx(-1.0)


def test_rho_hand_value():
    assert empirical_rho([1, 2, 3, 4], [2, 1, 4, 3]) == pytest.approx(0.6, abs=1e-15)


def test_rho_matches_numpy():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=50), rng.normal(size=50)
    assert empirical_rho(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-14)


def test_rho_errors():
    with pytest.raises(ValueError):
        empirical_rho([1, 1, 1, 1], [1, 2, 3, 4])
    with pytest.raises(ValueError):
        empirical_rho([1, 2, 3], [1, 2, 3])
    with pytest.raises(ValueError):
        empirical_rho([1, 2, 3, 4], [1, 2, 3])


def test_fisher_values():
    assert fisher_z(0.0)[0] == 0.0
    assert fisher_z(0.5)[0] == pytest.approx(0.5493061443340549, abs=1e-15)
    assert fisher_z(0.3, 28)[1] == pytest.approx(0.2, abs=1e-15)
    with pytest.raises(ValueError):
        fisher_z(1.0)
    with pytest.raises(ValueError):
        fisher_z(0.2, 3)


@given(st.floats(-0.999, 0.999))
@settings(max_examples=200, deadline=None)
def test_fisher_round_trip(rho):
    assert math.tanh(fisher_z(rho)[0]) == pytest.approx(rho, abs=1e-12)


def test_zero_distance_branch_is_exact():
    for term in REFERENCE_MODELS:
        m = CorrelationModel.reference(term)
        assert eval_correlation(m, 5.0, 5.0) == 1.0
        assert m.rho(0.0) == 1.0


def test_near_zero_limit_of_site_row():
    m = CorrelationModel.reference("dc1as")
    assert eval_correlation(m, 5.0, 5.0 * (1 + 1e-12)) == pytest.approx(math.tanh(2.66), abs=1e-9)
    assert math.tanh(2.66) == pytest.approx(0.990, abs=5e-4)


@pytest.mark.parametrize("term", sorted(REFERENCE_MODELS))
def test_reference_rows_decay_monotonically(term):
    fr = np.linspace(1e-6, 4.0, 4000)
    rho = CorrelationModel.reference(term).rho(fr)
    assert np.all(np.diff(rho) < 0)
    assert np.all((rho > -1) & (rho < 1))


@given(st.floats(0.01, 100), st.floats(0.01, 100))
@settings(max_examples=100, deadline=None)
def test_symmetry_and_ratio_dependence(f1, f2):
    m = CorrelationModel.reference("c_ca")
    assert eval_correlation(m, f1, f2) == eval_correlation(m, f2, f1)
    assert eval_correlation(m, 2 * f1, 2 * f2) == pytest.approx(eval_correlation(m, f1, f2), abs=1e-12)


def test_non_positive_frequency_rejected():
    with pytest.raises(ValueError):
        eval_correlation(CorrelationModel.reference("dc1e"), 0.0, 1.0)


@pytest.mark.parametrize("term", sorted(REFERENCE_MODELS))
def test_noisy_refit_recovers_curve(term):
    truth = CorrelationModel.reference(term)
    fit = fit_correlation_model(z_data(truth, noise=0.05, seed=1))
    assert np.max(np.abs(fit.rho(CHECK_FR) - truth.rho(CHECK_FR))) < 0.02


def test_noiseless_refit_reproduces_curve():
    truth = CorrelationModel.reference("dc1e")
    fit = fit_correlation_model(z_data(truth))
    fr = np.linspace(0.05, 5.5, 200)
    assert np.max(np.abs(fit.rho(fr) - truth.rho(fr))) < 1e-6


def test_constant_data_is_degenerate():
    emp = EmpiricalCorr(PAIRS[:, 0], PAIRS[:, 1], np.full(len(PAIRS), 0.4), np.full(len(PAIRS), 50))
    with pytest.raises(CorrelationFitError):
        fit_correlation_model(emp)


def test_too_few_distances():
    emp = EmpiricalCorr([1, 1, 1], [2, 3, 4], [0.9, 0.8, 0.7], [30, 30, 30])
    with pytest.raises(ValueError):
        fit_correlation_model(emp)


def test_fit_records_per_start_diagnostics():
    fit = fit_correlation_model(z_data(CorrelationModel.reference("c_ca"), 0.05, 2))
    assert len(fit.diagnostics["starts"]) == 8
    assert fit.rss == min(d["rss"] for d in fit.diagnostics["starts"] if d["converged"])


def test_empirical_correlations_pairing():
    rng = np.random.default_rng(3)
    base = rng.normal(size=40)
    values = {f: {f"S{i}": base[i] + 0.1 * rng.normal() for i in range(40)} for f in (1.0, 2.0, 4.0)}
    del values[4.0]["S0"]
    emp = empirical_correlations(values)
    assert len(emp.rho) == 3
    assert list(emp.n) == [40, 39, 39]
    np.testing.assert_allclose(emp.z_se, 1 / np.sqrt(emp.n - 3))
    assert np.all(emp.rho > 0.9)


def test_empirical_pairs_need_four_shared_instances():
    values = {1.0: {"a": 1, "b": 2, "c": 3}, 2.0: {"a": 1, "b": 3, "c": 2}}
    assert len(empirical_correlations(values).rho) == 0


def test_sampling_single_frequency():
    m = {"dc1e": CorrelationModel.reference("dc1e")}
    a = sample_correlated_terms(m, {"dc1e": 0.3}, [5.0], seed=4, n_samples=20000)["dc1e"]
    assert a.shape == (20000, 1)
    assert a.std() == pytest.approx(0.3, rel=0.02)


def test_sampling_repeated_frequency_is_identical():
    m = {"c_ca": CorrelationModel.reference("c_ca")}
    a = sample_correlated_terms(m, {"c_ca": 1.0}, [2.0, 2.0, 8.0], seed=1, n_samples=5)["c_ca"]
    np.testing.assert_array_equal(a[:, 0], a[:, 1])


def test_sampled_correlation_matches_model():
    m = {"dc1as": CorrelationModel.reference("dc1as")}
    f1, f2 = 1.0, math.e
    a = sample_correlated_terms(m, {"dc1as": [0.3, 0.5]}, [f1, f2], seed=5, n_samples=100_000)["dc1as"]
    assert np.corrcoef(a[:, 0], a[:, 1])[0, 1] == pytest.approx(eval_correlation(m["dc1as"], f1, f2), abs=0.01)
    assert a[:, 1].std() == pytest.approx(0.5, rel=0.01)


def test_sampling_is_seeded():
    m = {"dc1e": CorrelationModel.reference("dc1e")}
    a = sample_correlated_terms(m, {"dc1e": 1.0}, [1, 2, 3], seed=9)["dc1e"]
    b = sample_correlated_terms(m, {"dc1e": 1.0}, [1, 2, 3], seed=9)["dc1e"]
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        sample_correlated_terms(m, {"dc1e": 1.0}, [])


def test_psd_repair():
    R = correlation_matrix(CorrelationModel.reference("dc1bs"), FREQS[:20])
    assert np.max(np.abs(repair_psd(R) - R)) <= 1e-12
    bad = np.array([[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]])
    fixed = repair_psd(bad)
    assert np.linalg.eigvalsh(fixed).min() >= 0
    np.testing.assert_allclose(np.diag(fixed), 1.0)


@given(st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_repair_leaves_psd_matrices_alone(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(6, 10))
    C = np.corrcoef(X)
    assert np.max(np.abs(repair_psd(C) - C)) <= 1e-12


def test_model_file_round_trip(tmp_path):
    models = {t: CorrelationModel.reference(t) for t in REFERENCE_MODELS}
    save_models(tmp_path / "corr.json", models)
    back = load_models(tmp_path / "corr.json")
    assert {k: v.to_dict() for k, v in back.items()} == {k: v.to_dict() for k, v in models.items()}
