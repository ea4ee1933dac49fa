"""Disease classification and survival analysis on top of predicted age."""
from histoage.epi.icd10 import flags_from_codes, icd10_groups, map_icd10
from histoage.epi.logistic import LogisticFit, cv_accuracy, fit_logistic
from histoage.epi.cox import CoxFit, breslow_baseline, cox_log_partial_likelihood, fit_cox, kaplan_meier, survival_curve
from histoage.epi.comparison import classify_diseases, format_accuracy_table, hazard_comparison

__all__ = [
    "flags_from_codes", "icd10_groups", "map_icd10",
    "LogisticFit", "cv_accuracy", "fit_logistic",
    "CoxFit", "breslow_baseline", "cox_log_partial_likelihood", "fit_cox", "kaplan_meier", "survival_curve",
    "classify_diseases", "format_accuracy_table", "hazard_comparison",
]
