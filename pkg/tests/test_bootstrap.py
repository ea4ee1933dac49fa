import numpy as np
import pytest

from histoage.age.bootstrap import (
    age_bin,
    bootstrap_fit_predict,
    format_mae_table,
    mae,
    mae_table,
    percentile_interval,
    spearman,
    with_sex,
)
from histoage.synth.cohort import GeneratorSpec, gen_subjects, latent_ages
from histoage.synth.slides import epidermis_thickness, gen_slide
from histoage.utils.errors import DataError

FAST = dict(bootstraps=20, trees=5, depth=2, seed=3)


@pytest.fixture
def subjects(rng):
    n = 30
    ages = rng.uniform(15.0, 80.0, size=n)
    features = np.column_stack([ages / 10.0 + rng.normal(scale=0.5, size=n), rng.normal(size=n)])
    sexes = ["M" if i % 2 else "F" for i in range(n)]
    return features, ages, sexes


def test_out_of_bag_prediction_ignores_own_label(subjects):
    features, ages, sexes = subjects
    base = bootstrap_fit_predict(features, ages, sexes, **FAST)
    i = int(np.flatnonzero(base.oob)[0])
    shifted = ages.copy()
    shifted[i] += 100.0
    moved = bootstrap_fit_predict(features, shifted, sexes, **FAST)
    assert moved.point[i] == base.point[i]


def test_interval_contains_point(subjects):
    result = bootstrap_fit_predict(*subjects, **FAST)
    assert result.members == 20
    assert np.all(result.ci_lo <= result.point) and np.all(result.point <= result.ci_hi)
    assert np.all(result.point >= 0.0)
    frame = result.frame()
    assert frame["oob"].isin([0, 1]).all() and len(frame) == 30


def test_results_do_not_depend_on_worker_count(subjects):
    serial = bootstrap_fit_predict(*subjects, workers=1, **FAST)
    pooled = bootstrap_fit_predict(*subjects, workers=4, **FAST)
    np.testing.assert_array_equal(serial.point, pooled.point)


def test_mae_tables(subjects):
    result = bootstrap_fit_predict(*subjects, **FAST)
    table = mae_table(result, "S1")
    assert len(table) == 16
    assert table.loc[(table["sex"] == "M") & (table["age_bin"] == "All"), "n"].item() == 15
    assert table.loc[table["n"] == 0, "mae"].isna().all()
    wide = format_mae_table(table)
    assert len(wide) == 8
    assert {"Males # Participants", "Males MAE S1", "Females MAE S1"} <= set(wide.columns)
    assert wide.loc["All", "Females # Participants"] == 15


def test_age_bins_are_right_closed():
    assert age_bin([20, 21, 30, 70, 71]).tolist() == ["0-20", "21-30", "21-30", "61-70", "71+"]


def test_percentile_interval_is_widened_to_the_point():
    assert percentile_interval(np.array([1.0, 2.0, 3.0]), 10.0)[1] == 10.0
    lo, hi = percentile_interval(np.arange(101.0), 50.0)
    assert (lo, hi) == pytest.approx((2.5, 97.5))


def test_unknown_sex_code():
    with pytest.raises(DataError):
        with_sex(np.zeros((1, 2)), ["X"])
    np.testing.assert_array_equal(with_sex(np.zeros((2, 1)), ["M", "F"])[:, -1], [0.0, 1.0])


@pytest.mark.slow
def test_out_of_bag_share_per_subject(rng):
    n, members = 200, 1000
    features = rng.normal(size=(n, 2))
    result = bootstrap_fit_predict(features, rng.uniform(20.0, 80.0, n), ["M", "F"] * (n // 2),
                                   bootstraps=members, trees=1, depth=1, seed=4)
    expected = members * (1.0 - 1.0 / n) ** n
    counts = result.oob_mask.sum(axis=1)
    assert counts.mean() == pytest.approx(expected, rel=0.05)
    assert counts.mean() == pytest.approx(0.368 * members, rel=0.05)
    assert result.oob.all()


@pytest.mark.slow
def test_epidermis_thickness_recovers_latent_age():
    cohort, truth = gen_subjects(GeneratorSpec(scale_factor=0.112), seed=5)
    latent = latent_ages(truth)
    pids = cohort["pid"].tolist()
    thickness = [epidermis_thickness(gen_slide(pid, latent[pid], seed=5, size=512)[1]) for pid in pids]
    nuisance = np.random.default_rng(6).normal(size=len(pids))
    result = bootstrap_fit_predict(np.column_stack([thickness, nuisance]), cohort["age"].to_numpy(), cohort["sex"].tolist(),
                                   pids=pids, bootstraps=100, trees=50, depth=3, seed=8)
    truth_ages = np.array([latent[pid] for pid in pids])
    assert len(pids) > 150
    assert spearman(result.point, truth_ages) >= 0.8
    assert mae(result.point, truth_ages) <= 8.0
