"""
bootstrap.py
Bagged boosted-tree age regression with out-of-bag predictions, plus the
age/sex stratified MAE table.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from histoage.age.gbt import fit_gbt
from histoage.utils.errors import DataError
from histoage.utils.parallel import ordered_map
from histoage.utils.rng import derive_seed, numpy_rng

logger = logging.getLogger(__name__)

AGE_BIN_EDGES = [20, 30, 40, 50, 60, 70]
AGE_BIN_LABELS = ["0-20", "21-30", "31-40", "41-50", "51-60", "61-70", "71+"]
ALL_AGES = "All"
SEX_CODES = {"M": 0.0, "F": 1.0}
PREDICTION_COLUMNS = ["pid", "sex", "actual_age", "predicted_age", "ci_lo", "ci_hi", "oob"]


@dataclass
class BootstrapResult:
    pids: list
    sexes: list
    actual: np.ndarray
    member_predictions: np.ndarray  # (n, B) every member's prediction for every subject
    oob_mask: np.ndarray  # (n, B) True where the member's resample excluded the subject
    point: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    oob: np.ndarray  # False where the subject was in every resample (all-member fallback)

    @property
    def members(self) -> int:
        return self.member_predictions.shape[1]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "pid": self.pids,
            "sex": self.sexes,
            "actual_age": self.actual,
            "predicted_age": self.point,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "oob": self.oob.astype(int),
        }, columns=PREDICTION_COLUMNS)


def with_sex(features, sexes) -> np.ndarray:
    """Append sex (M=0, F=1) as the last feature column."""
    try:
        codes = np.array([SEX_CODES[s] for s in sexes], dtype=np.float64)
    except KeyError as e:
        raise DataError(f"sex must be 'M' or 'F', got {e.args[0]!r}") from None
    return np.column_stack([np.asarray(features, dtype=np.float64), codes])


def percentile_interval(values: np.ndarray, point: float, level: float = 95.0) -> tuple[float, float]:
    """Percentile interval widened where needed so it contains the point estimate."""
    tail = (100.0 - level) / 2.0
    lo, hi = np.percentile(values, [tail, 100.0 - tail])
    return float(min(lo, point)), float(max(hi, point))


def bootstrap_fit_predict(features, ages, sexes, pids=None, bootstraps: int = 1000, seed: int = 0,
                          depth: int = 4, trees: int = 200, eta: float = 0.1, lam: float = 1.0,
                          colsample: float = 1.0, min_child: int = 1, workers=None) -> BootstrapResult:
    """
    Fit `bootstraps` members on n-out-of-n resamples. A subject's prediction
    averages the members whose resample left it out; the member streams derive
    from (seed, member index) so scheduling never changes the result.
    """
    X = with_sex(features, sexes)
    y = np.asarray(ages, dtype=np.float64)
    n = len(y)
    if n == 0:
        raise DataError("no subjects to fit")
    pids = list(pids) if pids is not None else [str(i) for i in range(n)]

    def fit_member(b):
        idx = numpy_rng(seed, "bootstrap", b).integers(0, n, size=n)
        member = fit_gbt(X[idx], y[idx], depth=depth, trees=trees, eta=eta, lam=lam,
                         colsample=colsample, min_child=min_child, seed=derive_seed(seed, "member", b))
        in_bag = np.zeros(n, dtype=bool)
        in_bag[idx] = True
        return member.predict(X), ~in_bag

    logger.info(f"BOOTSTRAP START - {bootstraps} members - {n} subjects - {X.shape[1]} features")
    fitted = ordered_map(fit_member, range(bootstraps), workers)
    predictions = np.column_stack([p for p, _ in fitted])
    oob_mask = np.column_stack([m for _, m in fitted])

    point = np.empty(n)
    lo = np.empty(n)
    hi = np.empty(n)
    has_oob = oob_mask.any(axis=1)
    for i in range(n):
        values = predictions[i, oob_mask[i]] if has_oob[i] else predictions[i]
        point[i] = max(0.0, float(values.mean()))
        lo[i], hi[i] = percentile_interval(values, point[i])
        lo[i] = max(0.0, lo[i])
    if not has_oob.all():
        missing = [pids[i] for i in np.flatnonzero(~has_oob)]
        logger.warning(f"{len(missing)} subjects were in every resample; using the all-member mean for {missing[:5]}")

    return BootstrapResult(pids=pids, sexes=list(sexes), actual=y, member_predictions=predictions,
                           oob_mask=oob_mask, point=point, ci_lo=lo, ci_hi=hi, oob=has_oob)


# ---------------------- Summaries ----------------------

def age_bin(ages) -> np.ndarray:
    """Right-closed age bins: <=20, (20, 30], ..., >70."""
    codes = np.searchsorted(AGE_BIN_EDGES, np.asarray(ages, dtype=np.float64), side="left")
    return np.array(AGE_BIN_LABELS, dtype=object)[codes]


def mae(predicted, actual) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    return float(np.mean(np.abs(predicted - actual))) if len(actual) else float("nan")


def spearman(a, b) -> float:
    return float(stats.spearmanr(a, b).statistic)


def mae_table(result: BootstrapResult, scale_tag: str = "") -> pd.DataFrame:
    """
    Per sex x age bin (plus All) MAE of the point predictions, with a percentile
    interval over members: member b's MAE on the stratum's subjects it left out.
    Empty strata give a row with n=0 and blank values.
    """
    bins = age_bin(result.actual)
    sexes = np.asarray(result.sexes)
    errors = np.abs(result.member_predictions - result.actual[:, None])
    rows = []
    for sex in ("M", "F"):
        for label in AGE_BIN_LABELS + [ALL_AGES]:
            members = (sexes == sex) if label == ALL_AGES else (sexes == sex) & (bins == label)
            count = int(members.sum())
            row = {"scale_tag": scale_tag, "sex": sex, "age_bin": label, "n": count,
                   "mae": np.nan, "ci_lo": np.nan, "ci_hi": np.nan}
            if count:
                row["mae"] = mae(result.point[members], result.actual[members])
                mask = result.oob_mask[members]
                per_member_n = mask.sum(axis=0)
                usable = per_member_n > 0
                if usable.any():
                    per_member = (errors[members] * mask).sum(axis=0)[usable] / per_member_n[usable]
                    row["ci_lo"], row["ci_hi"] = (float(v) for v in np.percentile(per_member, [2.5, 97.5]))
            rows.append(row)
    return pd.DataFrame(rows, columns=["scale_tag", "sex", "age_bin", "n", "mae", "ci_lo", "ci_hi"])


def _cell(row) -> str:
    if row["n"] == 0 or pd.isna(row["mae"]):
        return ""
    if pd.isna(row["ci_lo"]):
        return f"{row['mae']:.2f}"
    return f"{row['mae']:.2f} ({row['ci_lo']:.1f} - {row['ci_hi']:.1f})"


def format_mae_table(table: pd.DataFrame) -> pd.DataFrame:
    """Wide layout: one row per age bin, one `MAE (lo - hi)` column per sex and scale, plus counts."""
    wide = pd.DataFrame(index=pd.Index(AGE_BIN_LABELS + [ALL_AGES], name="Age"))
    for sex, label in (("M", "Males"), ("F", "Females")):
        part = table[table["sex"] == sex]
        counts = part.drop_duplicates("age_bin").set_index("age_bin")["n"]
        wide[f"{label} # Participants"] = counts.reindex(wide.index).fillna(0).astype(int)
        for scale in sorted(part["scale_tag"].unique()):
            cells = part[part["scale_tag"] == scale].set_index("age_bin").apply(_cell, axis=1)
            wide[f"{label} MAE {scale}"] = cells.reindex(wide.index).fillna("")
    return wide
