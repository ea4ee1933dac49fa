"""
cohort.py
Synthetic study population: age/sex strata, prevalent diseases with an
age-dependent logit, and Weibull-Cox survival with planted coefficients.

The public cohort CSV carries only register-style fields. Everything a model is
supposed to recover (latent age, planted coefficients, uncensored survival
times) goes to a separate truth record.
"""
import json
import logging
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from histoage.config.disease_codes import DISEASE_COLUMNS, MODEL_DISEASES
from histoage.utils.errors import DataError, MissingArtifactError
from histoage.utils.rng import numpy_rng

logger = logging.getLogger(__name__)

# Inclusive integer age ranges of the seven strata.
AGE_STRATA = [(7, 20), (21, 30), (31, 40), (41, 50), (51, 60), (61, 70), (71, 94)]
MALE_COUNTS = [100, 100, 100, 100, 199, 217, 103]
FEMALE_COUNTS = [99, 99, 100, 99, 246, 153, 72]

COHORT_COLUMNS = ["pid", "sex", "age", "biopsy_date"] + [DISEASE_COLUMNS[d] for d in MODEL_DISEASES] + ["followup_years", "event"]
ADMIN_END = pd.Timestamp("2020-12-31")
BIOPSY_START = pd.Timestamp("2000-01-01")
BIOPSY_END = pd.Timestamp("2015-12-31")
DAYS_PER_YEAR = 365.25
AGE_CENTRE = 50.0

TRUTH_SCHEMA = {
    "type": "object",
    "required": ["seed", "spec", "subjects"],
    "properties": {
        "seed": {"type": "integer"},
        "spec": {"type": "object"},
        "subjects": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["pid", "latent_age", "survival_time", "censor_time"],
                "properties": {
                    "pid": {"type": "string"},
                    "latent_age": {"type": "number"},
                    "survival_time": {"type": "number", "minimum": 0},
                    "censor_time": {"type": "number", "minimum": 0},
                },
                "additionalProperties": False,
            },
        },
    },
}


def _default_intercepts():
    return {"heart": -6.0, "cancer": -5.5, "hypertension": -5.0, "copd": -6.5,
            "joint": -5.5, "osteoarthritis": -6.0, "osteoporosis": -7.0}


def _default_slopes():
    return {"heart": 0.06, "cancer": 0.05, "hypertension": 0.07, "copd": 0.05,
            "joint": 0.03, "osteoarthritis": 0.06, "osteoporosis": 0.07}


def _default_betas():
    return {"heart": 0.6, "cancer": 0.9, "hypertension": 0.2, "copd": 0.2,
            "joint": 0.2, "osteoarthritis": 0.2, "osteoporosis": 0.2}


class GeneratorSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    male_counts: list[int] = Field(default_factory=lambda: list(MALE_COUNTS))
    female_counts: list[int] = Field(default_factory=lambda: list(FEMALE_COUNTS))
    scale_factor: float = Field(1.0, gt=0.0)
    disease_intercepts: dict[str, float] = Field(default_factory=_default_intercepts)
    disease_slopes: dict[str, float] = Field(default_factory=_default_slopes)  # log-odds per year of age
    beta_age: float = 0.08  # log hazard per year
    disease_betas: dict[str, float] = Field(default_factory=_default_betas)
    weibull_shape: float = Field(1.5, gt=0.0)
    weibull_scale: dict[str, float] = Field(default_factory=lambda: {"M": 40.0, "F": 48.0})
    horizon_years: float = Field(20.0, ge=0.0)
    latent_age_sd: float = Field(3.0, ge=0.0)
    # texture law
    epidermis_base_px: float = Field(60.0, gt=0.0)
    epidermis_slope: float = Field(0.006, ge=0.0)
    fibre_spread_base_deg: float = Field(5.0, ge=0.0)
    fibre_spread_per_year: float = Field(0.9, ge=0.0)
    nevus_onset_age: float = 50.0
    nevus_rate_per_year: float = Field(0.02, ge=0.0)
    nevus_max_probability: float = Field(0.8, ge=0.0, le=1.0)

    @field_validator("male_counts", "female_counts")
    @classmethod
    def seven_strata(cls, value):
        if len(value) != len(AGE_STRATA):
            raise ValueError(f"expected {len(AGE_STRATA)} stratum counts")
        if any(c < 0 for c in value):
            raise ValueError("stratum counts must be non-negative")
        return value

    @field_validator("weibull_scale")
    @classmethod
    def positive_scales(cls, value):
        if set(value) != {"M", "F"} or any(v <= 0 for v in value.values()):
            raise ValueError("weibull_scale needs positive 'M' and 'F' entries")
        return value

    @model_validator(mode="after")
    def every_disease(self):
        for table in (self.disease_intercepts, self.disease_slopes, self.disease_betas):
            missing = [d for d in MODEL_DISEASES if d not in table]
            if missing:
                raise ValueError(f"missing disease parameters for {missing}")
        return self

    def counts(self, sex: str) -> list[int]:
        base = self.male_counts if sex == "M" else self.female_counts
        return [int(round(c * self.scale_factor)) for c in base]

    def epidermis_thickness(self, age: float) -> float:
        return self.epidermis_base_px * (1.0 - self.epidermis_slope * age)

    def fibre_spread(self, age: float) -> float:
        """Standard deviation (degrees) of collagen fibre orientation."""
        return self.fibre_spread_base_deg + self.fibre_spread_per_year * max(age, 0.0)

    def nevus_probability(self, age: float) -> float:
        if age <= self.nevus_onset_age:
            return 0.0
        return min(self.nevus_max_probability, self.nevus_rate_per_year * (age - self.nevus_onset_age))


def spec_from_config(synth) -> GeneratorSpec:
    """GeneratorSpec from the pipeline's `synth.*` section."""
    return GeneratorSpec(scale_factor=synth.scale_factor, horizon_years=synth.horizon_years,
                         latent_age_sd=synth.latent_age_sd, weibull_shape=synth.weibull_shape)


def _draw_strata(spec: GeneratorSpec, rng: np.random.Generator) -> pd.DataFrame:
    sexes, ages = [], []
    for sex in ("M", "F"):
        for (lo, hi), count in zip(AGE_STRATA, spec.counts(sex)):
            sexes.extend([sex] * count)
            ages.extend(rng.integers(lo, hi + 1, size=count).tolist())
    frame = pd.DataFrame({"sex": sexes, "age": np.asarray(ages, dtype=np.int64)})
    frame.insert(0, "pid", [f"P{i:05d}" for i in range(len(frame))])
    return frame


def gen_subjects(spec: GeneratorSpec, seed: int) -> tuple[pd.DataFrame, dict]:
    """Public cohort frame plus the hidden truth record."""
    rng = numpy_rng(seed, "cohort")
    frame = _draw_strata(spec, rng)
    n = len(frame)
    age = frame["age"].to_numpy(dtype=np.float64)

    span_days = (BIOPSY_END - BIOPSY_START).days
    offsets = rng.integers(0, span_days + 1, size=n)
    biopsy = BIOPSY_START + pd.to_timedelta(offsets, unit="D")
    frame["biopsy_date"] = biopsy.strftime("%Y-%m-%d")

    for disease in MODEL_DISEASES:
        logit = spec.disease_intercepts[disease] + spec.disease_slopes[disease] * age
        frame[DISEASE_COLUMNS[disease]] = (rng.random(n) < 1.0 / (1.0 + np.exp(-logit))).astype(np.int64)

    eta = spec.beta_age * (age - AGE_CENTRE)
    for disease in MODEL_DISEASES:
        eta = eta + spec.disease_betas[disease] * frame[DISEASE_COLUMNS[disease]].to_numpy()
    scale = frame["sex"].map(spec.weibull_scale).to_numpy(dtype=np.float64)
    u = 1.0 - rng.random(n)  # (0, 1]
    survival = scale * (-np.log(u) / np.exp(eta)) ** (1.0 / spec.weibull_shape)
    administrative = (ADMIN_END - biopsy).days.to_numpy() / DAYS_PER_YEAR
    censor = np.minimum(spec.horizon_years, administrative)
    frame["followup_years"] = np.round(np.minimum(survival, censor), 6)
    frame["event"] = (survival <= censor).astype(np.int64)
    if spec.horizon_years == 0:
        frame["event"] = 0

    latent = age + rng.normal(0.0, spec.latent_age_sd, size=n) if spec.latent_age_sd > 0 else age.copy()
    latent = np.clip(latent, 0.0, None)
    truth = {
        "seed": int(seed),
        "spec": spec.model_dump(mode="json"),
        "subjects": [
            {"pid": pid, "latent_age": round(float(la), 6), "survival_time": round(float(st), 6), "censor_time": round(float(ct), 6)}
            for pid, la, st, ct in zip(frame["pid"], latent, survival, censor)
        ],
    }
    logger.info(f"COHORT GENERATED - {n} subjects - {int(frame['event'].sum())} events")
    return frame[COHORT_COLUMNS], truth


def latent_ages(truth: dict) -> dict:
    return {s["pid"]: s["latent_age"] for s in truth["subjects"]}


def write_cohort(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame[COHORT_COLUMNS].to_csv(path, index=False, float_format="%.9g", lineterminator="\n")
    return path


def read_cohort(path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path)
    frame = pd.read_csv(path, dtype={"pid": str, "sex": str, "biopsy_date": str})
    missing = [c for c in COHORT_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing cohort columns {missing}")
    return frame


def write_truth(truth: dict, path) -> Path:
    jsonschema.validate(truth, TRUTH_SCHEMA)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(truth, f, indent=2, sort_keys=True)
    return path


def read_truth(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path)
    with open(path, encoding="utf-8") as f:
        truth = json.load(f)
    try:
        jsonschema.validate(truth, TRUTH_SCHEMA)
    except jsonschema.ValidationError as e:
        raise DataError(f"{path}: {e.message}") from e
    return truth
