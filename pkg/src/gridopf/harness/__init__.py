"""Metrics, evaluation reports and experiment sweeps."""
from ..metrics import mse, optimality_ratio, trmae
from .report import (POST_PF_FAMILIES, PRE_PF_FAMILIES, SUPERVISED_ROWS, THRESHOLDS, EvalReport,
                     evaluate, format_table, model_predictor, post_pf_degrees, report_tables)
from .sweep import improving_pairs, sweep

__all__ = [
    "EvalReport", "POST_PF_FAMILIES", "PRE_PF_FAMILIES", "SUPERVISED_ROWS", "THRESHOLDS",
    "evaluate", "format_table", "improving_pairs", "model_predictor", "mse", "optimality_ratio",
    "post_pf_degrees", "report_tables", "sweep", "trmae",
]
