import jsonschema
import numpy as np
import pandas as pd
import pytest
from scipy.stats import chi2_contingency

from histoage.config.disease_codes import DISEASE_COLUMNS, MODEL_DISEASES
from histoage.imaging.tiler import read_slide, tissue_fraction
from histoage.synth.cohort import (
    AGE_STRATA,
    COHORT_COLUMNS,
    GeneratorSpec,
    gen_subjects,
    latent_ages,
    read_cohort,
    read_truth,
    write_cohort,
    write_truth,
)
from histoage.synth.slides import (
    BACKGROUND,
    EPIDERMIS,
    NEVUS,
    dominant_region,
    epidermis_thickness,
    gen_slide,
    gen_slides,
    read_mask,
    slide_id_for,
)
from histoage.utils.errors import DataError


def test_strata_counts_and_age_ranges(small_cohort):
    frame, _ = small_cohort
    spec = GeneratorSpec(scale_factor=0.2)
    for sex in ("M", "F"):
        ages = frame.loc[frame["sex"] == sex, "age"].to_numpy()
        assert len(ages) == sum(spec.counts(sex))
        start = 0
        for (lo, hi), count in zip(AGE_STRATA, spec.counts(sex)):
            block = ages[start:start + count]
            assert block.min() >= lo and block.max() <= hi
            start += count


def test_public_cohort_hides_the_truth(small_cohort):
    frame, truth = small_cohort
    assert list(frame.drop(columns="predicted_age").columns) == COHORT_COLUMNS
    assert not {"latent_age", "survival_time"} & set(frame.columns)
    assert len(truth["subjects"]) == len(frame)
    assert set(frame["event"]) <= {0, 1}
    assert (frame["followup_years"] <= 20.0).all()


def test_generation_is_deterministic():
    spec = GeneratorSpec(scale_factor=0.05)
    first, t1 = gen_subjects(spec, seed=5)
    second, t2 = gen_subjects(spec, seed=5)
    pd.testing.assert_frame_equal(first, second)
    assert t1 == t2


def test_zero_horizon_has_no_events():
    frame, _ = gen_subjects(GeneratorSpec(scale_factor=0.05, horizon_years=0.0), seed=1)
    assert frame["event"].sum() == 0
    assert (frame["followup_years"] == 0.0).all()


def test_flat_disease_logit_is_independent_of_age():
    flat = GeneratorSpec(scale_factor=2.8, disease_intercepts={d: -1.5 for d in MODEL_DISEASES},
                         disease_slopes={d: 0.0 for d in MODEL_DISEASES})
    cohort, _ = gen_subjects(flat, seed=17)
    assert len(cohort) > 4900
    strata = pd.cut(cohort["age"], [lo - 0.5 for lo, _ in AGE_STRATA] + [AGE_STRATA[-1][1] + 0.5])
    p_values = {}
    for disease in MODEL_DISEASES:
        table = pd.crosstab(strata, cohort[DISEASE_COLUMNS[disease]])
        p_values[disease] = chi2_contingency(table.to_numpy())[1]
    # Bonferroni over the diseases
    assert min(p_values.values()) > 0.01 / len(MODEL_DISEASES), p_values


def test_latent_age_without_noise_is_the_age():
    frame, truth = gen_subjects(GeneratorSpec(scale_factor=0.05, latent_age_sd=0.0), seed=2)
    latent = latent_ages(truth)
    assert all(latent[pid] == age for pid, age in zip(frame["pid"], frame["age"]))


def test_cohort_and_truth_files(tmp_path):
    frame, truth = gen_subjects(GeneratorSpec(scale_factor=0.05), seed=3)
    loaded = read_cohort(write_cohort(frame, tmp_path / "cohort.csv"))
    assert loaded["pid"].tolist() == frame["pid"].tolist()
    assert read_truth(write_truth(truth, tmp_path / "truth.json")) == truth
    truth["subjects"][0]["age_hint"] = 3
    with pytest.raises(jsonschema.ValidationError):
        write_truth(truth, tmp_path / "bad.json")


def test_epidermis_thins_with_age():
    _, young = gen_slide("P00001", 10.0, seed=4, size=512)
    _, old = gen_slide("P00001", 80.0, seed=4, size=512)
    ratio = epidermis_thickness(young) / epidermis_thickness(old)
    # 60 * (1 - 0.006 * 10) against 60 * (1 - 0.006 * 80)
    assert 1.7 <= ratio <= 1.95


def test_mask_matches_the_pixels():
    slide, mask = gen_slide("P00002", 55.0, seed=4, size=512)
    assert slide.slide_id == "P00002-1" and slide.pixels.shape == (512, 512, 3)
    assert set(np.unique(mask)) <= {0, 1, 2, 3}
    assert tissue_fraction(slide.pixels[mask == BACKGROUND]) < 0.01
    assert tissue_fraction(slide.pixels[mask != BACKGROUND]) > 0.85


def test_texture_laws():
    spec = GeneratorSpec()
    assert spec.nevus_probability(40.0) == 0.0
    assert spec.nevus_probability(60.0) == pytest.approx(0.2)
    assert spec.nevus_probability(200.0) == 0.8
    assert spec.fibre_spread(10.0) == pytest.approx(14.0)
    assert spec.epidermis_thickness(50.0) == pytest.approx(42.0)


def test_dominant_region_thresholds():
    mask = np.full((20, 20), 2, dtype=np.uint8)
    assert dominant_region(mask, 0, 0, 20) == "collagen"
    mask[:2, :10] = EPIDERMIS  # 5%
    assert dominant_region(mask, 0, 0, 20) == "epidermis"
    mask[10:14, :10] = NEVUS  # 10%
    assert dominant_region(mask, 0, 0, 20) == "nevus"
    assert dominant_region(np.zeros((8, 8), np.uint8), 0, 0, 8) == "background"


def test_small_slides_are_refused():
    assert slide_id_for("P00009") == "P00009-1"
    with pytest.raises(DataError):
        gen_slide("P00001", 40.0, seed=0, size=200)


def test_slides_are_written_with_masks(tmp_path):
    cohort = pd.DataFrame({"pid": ["P00002", "P00001"]})
    paths = gen_slides(cohort, {"P00001": 30.0, "P00002": 70.0}, seed=1, slides_dir=tmp_path / "slides",
                       mask_dir=tmp_path / "masks", size=256, workers=1)
    assert [p.stem for p in paths] == ["P00001-1", "P00002-1"]
    slide = read_slide(paths[0])
    assert slide.subject_pid == "P00001"
    assert read_mask("P00001-1", tmp_path / "masks").shape == (256, 256)
