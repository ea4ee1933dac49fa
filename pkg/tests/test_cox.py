import logging

import numpy as np
import pandas as pd
import pytest

from histoage.config.disease_codes import DISEASE_COLUMNS, MODEL_DISEASES
from histoage.epi.cox import (
    Z_975,
    CoxFit,
    breslow_baseline,
    cox_log_partial_likelihood,
    fit_cox,
    kaplan_meier,
    survival_at,
    survival_curve,
)
from histoage.synth.cohort import GeneratorSpec, gen_subjects
from histoage.utils.errors import NoEventsError


def _brute_force(beta, times, events, X, strata):
    eta = X @ beta
    total = 0.0
    for i in range(len(times)):
        if not events[i]:
            continue
        at_risk = (strata == strata[i]) & (times >= times[i])
        total += eta[i] - np.log(np.exp(eta[at_risk]).sum())
    return total


def test_two_subjects_without_covariate_effect():
    assert cox_log_partial_likelihood([0.0], [1.0, 2.0], [1, 1], [[0.0], [0.0]]) == pytest.approx(-np.log(2.0))


def test_partial_likelihood_matches_brute_force(rng):
    n = 40
    times = rng.integers(1, 8, size=n).astype(float)  # heavy ties
    events = rng.random(n) < 0.6
    X = rng.normal(size=(n, 3))
    strata = np.where(rng.random(n) < 0.5, "M", "F")
    beta = rng.normal(scale=0.5, size=3)
    expected = _brute_force(beta, times, events, X, strata)
    assert cox_log_partial_likelihood(beta, times, events, X, strata) == pytest.approx(expected, abs=1e-10)


def test_zero_covariate_gets_zero_coefficient(rng):
    n = 60
    x = rng.normal(size=n)
    times = rng.exponential(1.0 / np.exp(0.5 * x))
    X = np.column_stack([x, np.zeros(n)])
    fit = fit_cox(times, np.ones(n), X)
    assert fit.coef[1] == 0.0
    assert fit.converged
    assert fit.summary()["covariate"].tolist() == ["x0", "x1"]


def test_survival_from_a_known_baseline():
    fit = CoxFit(names=["x"], coef=np.array([0.0]), se=np.array([0.1]), loglik=0.0, lam=0.0, iterations=0,
                 converged=True, baseline={"all": pd.DataFrame({"t": [1.0], "cumhaz": [1.0]})},
                 max_followup={"all": 2.0})
    curve = survival_curve(fit, [0.0], [0.0, 0.5, 1.0, 1.5, 3.0])
    np.testing.assert_allclose(curve["survival"], [1.0, 1.0, np.exp(-1), np.exp(-1), np.exp(-1)])
    assert curve["extrapolated"].tolist() == [False, False, False, False, True]


def test_fitted_curves_start_at_one_and_fall(rng):
    n = 80
    X = rng.normal(size=(n, 1))
    times = rng.exponential(1.0, size=n)
    fit = fit_cox(times, rng.random(n) < 0.8, X, strata=np.where(np.arange(n) % 2, "M", "F"))
    curve = survival_curve(fit, [0.0], np.linspace(0.0, times.max(), 25))
    for _, part in curve.groupby("stratum"):
        values = part["survival"].to_numpy()
        assert values[0] == 1.0
        assert np.all(np.diff(values) <= 0.0)


def test_breslow_baseline_by_hand():
    baseline = breslow_baseline([1.0, 2.0, 3.0], [1, 1, 0], np.zeros((3, 1)), [0.0])[0]
    np.testing.assert_allclose(baseline["cumhaz"], [1 / 3, 1 / 3 + 1 / 2])
    np.testing.assert_allclose(baseline["t"], [1.0, 2.0])


def test_no_events_is_an_error():
    with pytest.raises(NoEventsError):
        fit_cox([1.0, 2.0, 3.0], [0, 0, 0], np.zeros((3, 1)))


def test_stratum_without_events_warns(caplog):
    times = [1.0, 2.0, 3.0, 1.5, 2.5]
    with caplog.at_level(logging.WARNING, logger="histoage"):
        fit = fit_cox(times, [1, 1, 0, 0, 0], [[0.1], [0.4], [0.2], [0.3], [0.5]], strata=["a", "a", "a", "b", "b"])
    assert any("no events" in r.getMessage() for r in caplog.records)
    assert fit.baseline["b"]["cumhaz"].tolist() == [0.0]


def test_kaplan_meier_by_hand():
    curve = kaplan_meier([1.0, 2.0, 3.0, 4.0], [1, 0, 1, 0])
    np.testing.assert_allclose(curve["survival"], [1.0, 0.75, 0.375])
    assert survival_at(curve, 2.5) == 0.75
    assert survival_at(curve, 0.5) == 1.0



# ---------------------- Synthetic cohorts ----------------------

COVARIATES = ["age"] + [DISEASE_COLUMNS[d] for d in MODEL_DISEASES]


def _planted(spec):
    return np.array([spec.beta_age] + [spec.disease_betas[d] for d in MODEL_DISEASES])


def _fit(cohort):
    X = cohort[COVARIATES].to_numpy(dtype=float)
    return fit_cox(cohort["followup_years"], cohort["event"], X, strata=cohort["sex"], names=COVARIATES, lam=0.1)


@pytest.mark.slow
def test_planted_coefficients_are_recovered():
    spec = GeneratorSpec(scale_factor=1.12)
    cohort, _ = gen_subjects(spec, seed=21)
    fit = _fit(cohort)
    planted = _planted(spec)
    assert fit.coef[0] == pytest.approx(spec.beta_age, abs=0.02)
    z = np.abs(fit.coef[1:] - planted[1:]) / fit.se[1:]
    assert np.all(z < 3.5), dict(zip(COVARIATES[1:], z.round(2)))


@pytest.mark.slow
def test_wald_intervals_cover_planted_coefficients():
    spec = GeneratorSpec(scale_factor=1.12)
    planted = _planted(spec)
    covered = []
    for seed in range(50):
        fit = _fit(gen_subjects(spec, seed=1000 + seed)[0])
        covered.append(np.abs(fit.coef - planted) <= Z_975 * fit.se)
    coverage = np.mean(covered)
    assert coverage >= 0.90, coverage


def test_kaplan_meier_orders_age_bins():
    cohort, _ = gen_subjects(GeneratorSpec(scale_factor=0.5), seed=8)
    bins = pd.cut(cohort["age"], [0, 40, 60, 100], labels=["young", "middle", "old"])
    at_ten = []
    for label in ["young", "middle", "old"]:
        part = cohort[bins == label]
        at_ten.append(survival_at(kaplan_meier(part["followup_years"], part["event"]), 10.0))
    assert at_ten[0] > at_ten[1] > at_ten[2]
