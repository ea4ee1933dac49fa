"""Chronological age regression from slide features."""
from histoage.age.gbt import GBTMember, RegressionTree, fit_gbt
from histoage.age.bootstrap import BootstrapResult, bootstrap_fit_predict, mae_table, format_mae_table
from histoage.age.attention import rank_attention_patches

__all__ = [
    "GBTMember", "RegressionTree", "fit_gbt",
    "BootstrapResult", "bootstrap_fit_predict", "mae_table", "format_mae_table",
    "rank_attention_patches",
]
