"""
attention.py
Rank individual patches by how closely a patch-level age model reproduces the
subject's actual age. Patch predictions are out-of-fold with folds grouped by
subject, so no patch is scored by a model that saw its subject.
"""
import logging

import numpy as np
import pandas as pd
from sklearn.model_selection import GroupKFold

from histoage.age.bootstrap import with_sex
from histoage.age.gbt import fit_gbt
from histoage.utils.errors import DataError
from histoage.utils.rng import derive_seed

logger = logging.getLogger(__name__)

RANK_COLUMNS = ["rank", "patch_id", "slide_id", "pid", "sex", "actual_age", "predicted_age", "abs_error", "subject_rank"]


def out_of_fold_patch_predictions(features, pids, sexes, ages, folds: int = 5, seed: int = 0, **gbt_params) -> np.ndarray:
    X = with_sex(features, sexes)
    y = np.asarray(ages, dtype=np.float64)
    groups = np.asarray(pids)
    n_groups = len(np.unique(groups))
    if n_groups < 2:
        raise DataError("attention ranking needs patches from at least two subjects")
    folds = min(folds, n_groups)
    predictions = np.empty(len(y))
    for fold, (train, test) in enumerate(GroupKFold(n_splits=folds).split(X, y, groups)):
        member = fit_gbt(X[train], y[train], seed=derive_seed(seed, "attention", fold), **gbt_params)
        predictions[test] = member.predict(X[test])
    return predictions


def rank_attention_patches(patch_ids, slide_ids, pids, sexes, actual_ages, predicted_ages) -> pd.DataFrame:
    """Ascending |predicted - actual|; ties broken by patch id. Every patch appears exactly once."""
    frame = pd.DataFrame({
        "patch_id": list(patch_ids),
        "slide_id": list(slide_ids),
        "pid": list(pids),
        "sex": list(sexes),
        "actual_age": np.asarray(actual_ages, dtype=np.float64),
        "predicted_age": np.asarray(predicted_ages, dtype=np.float64),
    })
    frame["abs_error"] = (frame["predicted_age"] - frame["actual_age"]).abs()
    frame = frame.sort_values(["abs_error", "patch_id"], kind="mergesort").reset_index(drop=True)
    frame.insert(0, "rank", np.arange(1, len(frame) + 1))
    frame["subject_rank"] = frame.groupby("pid").cumcount() + 1
    return frame[RANK_COLUMNS]


def top_patches(ranked: pd.DataFrame, per_subject: int = 1, limit: int | None = None) -> pd.DataFrame:
    """Best `per_subject` patches of each subject, in global rank order."""
    top = ranked[ranked["subject_rank"] <= per_subject]
    return top.head(limit) if limit is not None else top


def region_enrichment(ranked: pd.DataFrame, regions: dict, region: str = "epidermis", top_fraction: float = 0.1) -> dict:
    """
    Share of `region` among the top-ranked patches divided by its share among
    all ranked patches. regions maps patch_id -> dominant region label.
    """
    labels = ranked["patch_id"].map(regions)
    if labels.isna().any():
        raise DataError(f"{int(labels.isna().sum())} ranked patches have no region label")
    top_n = max(1, int(round(top_fraction * len(ranked))))
    base_share = float((labels == region).mean())
    top_share = float((labels.iloc[:top_n] == region).mean())
    ratio = top_share / base_share if base_share > 0 else float("nan")
    logger.info(f"Region enrichment - {region} - top {top_n}: {top_share:.3f} vs all: {base_share:.3f} - ratio {ratio:.2f}")
    return {"region": region, "top_n": top_n, "top_share": top_share, "base_share": base_share, "ratio": ratio}
