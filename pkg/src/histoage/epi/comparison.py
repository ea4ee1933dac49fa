"""
comparison.py
Downstream use of predicted age: prevalent-disease classification with actual,
predicted and combined age covariates, and a side-by-side Cox comparison of
(actual age, registry diseases) against (predicted age, predicted diseases).
"""
import logging

import numpy as np
import pandas as pd

from histoage.config.disease_codes import DISEASE_COLUMNS, DISEASE_LABELS, MODEL_DISEASES
from histoage.epi.cox import CoxFit, fit_cox, survival_curve
from histoage.epi.logistic import accuracy, cv_predict_proba, fit_logistic, fold_accuracy
from histoage.utils.errors import DataError
from histoage.utils.rng import derive_seed

logger = logging.getLogger(__name__)

ARMS = ["actual", "predicted", "combined"]
SEXES = {"M": "Males", "F": "Females"}
COHORT_COLUMNS = ["pid", "sex", "age", "biopsy_date"] + list(DISEASE_COLUMNS.values()) + ["followup_years", "event"]
ACCURACY_COLUMNS = ["disease", "sex", "arm", "n", "cases", "cv_accuracy", "in_sample_accuracy", "folds", "converged"]
HR_COLUMNS = ["covariate", "arm", "hr", "ci_lo", "ci_hi"]
CURVE_COLUMNS = ["stratum", "t", "survival"]


def validate_cohort(cohort: pd.DataFrame) -> pd.DataFrame:
    missing = [c for c in COHORT_COLUMNS if c not in cohort.columns]
    if missing:
        raise DataError(f"cohort is missing columns {missing}")
    if cohort["pid"].duplicated().any():
        raise DataError("cohort has duplicate pids")
    if not cohort["sex"].isin(list(SEXES)).all():
        raise DataError("cohort sex must be 'M' or 'F'")
    if (cohort["followup_years"] < 0).any():
        raise DataError("cohort has negative follow-up")
    flags = cohort[list(DISEASE_COLUMNS.values()) + ["event"]]
    if not flags.isin([0, 1]).all().all():
        raise DataError("disease flags and event must be 0/1")
    return cohort


def join_predictions(cohort: pd.DataFrame, predictions: pd.DataFrame) -> pd.DataFrame:
    """Inner join of cohort and predicted ages on pid; subjects without a prediction are dropped with a warning."""
    merged = cohort.merge(predictions[["pid", "predicted_age"]], on="pid", how="inner", validate="one_to_one")
    dropped = len(cohort) - len(merged)
    if dropped:
        logger.warning(f"{dropped} cohort subjects have no predicted age and are left out")
    if merged.empty:
        raise DataError("no cohort subject has a predicted age")
    return merged.sort_values("pid", kind="mergesort").reset_index(drop=True)


def arm_covariates(frame: pd.DataFrame, arm: str) -> np.ndarray:
    if arm == "actual":
        return frame[["age"]].to_numpy(dtype=np.float64)
    if arm == "predicted":
        return frame[["predicted_age"]].to_numpy(dtype=np.float64)
    if arm == "combined":
        return frame[["age", "predicted_age"]].to_numpy(dtype=np.float64)
    raise DataError(f"unknown arm {arm!r}; expected one of {ARMS}")


def classify_diseases(frame: pd.DataFrame, folds: int = 5, seed: int = 0, ridge: float = 1e-6,
                      max_iter: int = 100) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    Per disease and sex, fit the three age arms. Returns the long accuracy table
    and the out-of-fold disease probabilities of the predicted-age arm (one
    column per disease). The fold split is shared by the three arms.
    """
    frame = frame.reset_index(drop=True)
    rows = []
    probabilities = pd.DataFrame({"pid": frame["pid"].to_numpy()})
    for disease in MODEL_DISEASES:
        column = DISEASE_COLUMNS[disease]
        probabilities[column] = np.nan
        for sex in SEXES:
            part = frame[frame["sex"] == sex]
            y = part[column].to_numpy(dtype=int)
            split_seed = derive_seed(seed, "classify", disease, sex)
            for arm in ARMS:
                X = arm_covariates(part, arm)
                row = {"disease": disease, "sex": sex, "arm": arm, "n": len(y), "cases": int(y.sum()),
                       "cv_accuracy": np.nan, "in_sample_accuracy": np.nan, "folds": 0, "converged": False}
                try:
                    fit = fit_logistic(X, y, ridge=ridge, max_iter=max_iter)
                    oof, used = cv_predict_proba(X, y, folds, split_seed, ridge, max_iter)
                except DataError as e:
                    logger.warning(f"Classifier skipped - {disease} - {sex} - {arm}: {e}")
                    if arm == "predicted" and len(y):
                        probabilities.loc[part.index, column] = float(y.mean())
                    rows.append(row)
                    continue
                row.update(in_sample_accuracy=accuracy(fit, X, y), converged=fit.converged, folds=used,
                           cv_accuracy=fold_accuracy(oof, y, used, split_seed))
                if arm == "predicted":
                    probabilities.loc[part.index, column] = oof
                rows.append(row)
        logger.info(f"CLASSIFIED - {disease}")
    return pd.DataFrame(rows, columns=ACCURACY_COLUMNS), probabilities


def format_accuracy_table(table: pd.DataFrame) -> pd.DataFrame:
    """Wide layout: one row per disease, Actual/Predicted/Combined cross-validated accuracy per sex."""
    wide = pd.DataFrame(index=pd.Index([DISEASE_LABELS[d] for d in MODEL_DISEASES], name="Disease"))
    for sex, label in SEXES.items():
        for arm in ARMS:
            part = table[(table["sex"] == sex) & (table["arm"] == arm)].set_index("disease")["cv_accuracy"]
            values = [part.get(d, np.nan) for d in MODEL_DISEASES]
            wide[f"{label} {arm.capitalize()}"] = ["" if pd.isna(v) else f"{v:.2f}" for v in values]
    return wide


# ---------------------- Survival ----------------------

COX_COVARIATES = ["age"] + list(DISEASE_COLUMNS.values())


def cox_design(frame: pd.DataFrame, arm: str, disease_probabilities: pd.DataFrame | None = None,
               mode: str = "threshold") -> np.ndarray:
    """
    Actual arm: chronological age and registry flags. Predicted arm: predicted
    age and classifier outputs, thresholded at 0.5 or kept as probabilities.
    """
    disease_columns = list(DISEASE_COLUMNS.values())
    if arm == "actual":
        return frame[["age"] + disease_columns].to_numpy(dtype=np.float64)
    if arm != "predicted":
        raise DataError(f"unknown survival arm {arm!r}")
    if disease_probabilities is None:
        raise DataError("the predicted arm needs classifier disease probabilities")
    aligned = frame[["pid"]].merge(disease_probabilities, on="pid", how="left")
    diseases = aligned[disease_columns].to_numpy(dtype=np.float64)
    if np.isnan(diseases).any():
        raise DataError("some subjects have no predicted disease probabilities")
    if mode == "threshold":
        diseases = (diseases >= 0.5).astype(np.float64)
    return np.column_stack([frame["predicted_age"].to_numpy(dtype=np.float64), diseases])


def fit_arm(frame: pd.DataFrame, arm: str, disease_probabilities=None, lam: float = 0.1, mode: str = "threshold") -> CoxFit:
    X = cox_design(frame, arm, disease_probabilities, mode)
    return fit_cox(frame["followup_years"], frame["event"], X, strata=frame["sex"], names=COX_COVARIATES, lam=lam)


def hr_table(fits: dict) -> pd.DataFrame:
    rows = []
    for arm, fit in fits.items():
        lo, hi = fit.ci
        for name, hr, a, b in zip(fit.names, fit.hazard_ratios, lo, hi):
            rows.append({"covariate": name, "arm": arm, "hr": float(hr), "ci_lo": float(a), "ci_hi": float(b)})
    return pd.DataFrame(rows, columns=HR_COLUMNS)


def ci_overlap(table: pd.DataFrame, first: str = "actual", second: str = "predicted") -> pd.DataFrame:
    a = table[table["arm"] == first].set_index("covariate")
    b = table[table["arm"] == second].set_index("covariate")
    common = [c for c in a.index if c in b.index]
    overlap = [bool(a.at[c, "ci_lo"] <= b.at[c, "ci_hi"] and b.at[c, "ci_lo"] <= a.at[c, "ci_hi"]) for c in common]
    return pd.DataFrame({"covariate": common, "overlap": overlap})


def hazard_comparison(frame: pd.DataFrame, disease_probabilities: pd.DataFrame, lam: float = 0.1,
                      mode: str = "threshold") -> tuple[dict, pd.DataFrame, pd.DataFrame]:
    """Fit both arms; returns (fits by arm, HR table, per-covariate CI overlap)."""
    fits = {
        "actual": fit_arm(frame, "actual", lam=lam),
        "predicted": fit_arm(frame, "predicted", disease_probabilities, lam=lam, mode=mode),
    }
    table = hr_table(fits)
    overlap = ci_overlap(table)
    disjoint = overlap.loc[~overlap["overlap"], "covariate"].tolist()
    if disjoint:
        logger.info(f"Hazard-ratio intervals do not overlap for {disjoint}")
    return fits, table, overlap


def arm_curves(fit: CoxFit, X: np.ndarray, strata, horizon: float = 20.0, step: float = 0.25) -> pd.DataFrame:
    """Survival curves per stratum at the stratum's mean covariate profile."""
    grid = np.round(np.arange(0.0, horizon + step / 2, step), 10)
    strata = np.asarray(strata, dtype=object)
    frames = []
    for stratum in fit.strata:
        profile = X[strata == stratum].mean(axis=0)
        frames.append(survival_curve(fit, profile, grid, stratum=stratum))
    return pd.concat(frames, ignore_index=True)
