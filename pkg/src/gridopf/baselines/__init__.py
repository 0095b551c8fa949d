from .dcopf import DcOpfError, DcSolution, complete_dc_solution, solve_dcopf
from .penalty import PenaltyConfig, PenaltyResult, solve_acopf_penalty

__all__ = [
    "DcOpfError", "DcSolution", "complete_dc_solution", "solve_dcopf",
    "PenaltyConfig", "PenaltyResult", "solve_acopf_penalty",
]
