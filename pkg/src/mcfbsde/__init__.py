"""Solver library for fully coupled FBSDEs driven by the compensated
martingale of a continuous-time, finite-state Markov chain."""

from .algebra import (CoefficientSet, GStructure, TripleVector, bracket,
                      eval_F, eval_H, to_chain_driven, weighted_bracket)
from .chain import (ChainModel, ChainPath, DiscreteChainTree, PathBundle,
                    build_tree, optional_qv, predictable_qv, qv_density,
                    represent_martingale, simulate_paths, validate_generator)
from .fields import Forcing, SolutionField
from .linear_fbsde import (THM2, THM3, AffineSolution, LinearFBSDEProblem,
                           linear_residual, solve_linear)
from .oracle import brute_force_solve, global_residual
from .riccati import (CASE_N_GT_M, CASE_N_LE_M, RiccatiProblem,
                      RiccatiSolution, riccati_residual, solve_riccati)
from .solver import (ContinuationConfig, ConvergenceReport, FBSDEProblem,
                     contraction_norm, picard_sweep, solution_residual,
                     solve_continuation, solve_level)
from .verify import (LITERAL, PROOF_SUFFICIENT, check_duality,
                     check_form_equivalence, check_lipschitz,
                     check_monotonicity, check_qv_consistency)

__version__ = "0.1.0"

__all__ = [
    "CoefficientSet", "GStructure", "TripleVector", "bracket", "eval_F",
    "eval_H", "to_chain_driven", "weighted_bracket",
    "ChainModel", "ChainPath", "DiscreteChainTree", "PathBundle",
    "build_tree", "optional_qv", "predictable_qv", "qv_density",
    "represent_martingale", "simulate_paths", "validate_generator",
    "Forcing", "SolutionField",
    "THM2", "THM3", "AffineSolution", "LinearFBSDEProblem",
    "linear_residual", "solve_linear",
    "brute_force_solve", "global_residual",
    "CASE_N_GT_M", "CASE_N_LE_M", "RiccatiProblem", "RiccatiSolution",
    "riccati_residual", "solve_riccati",
    "ContinuationConfig", "ConvergenceReport", "FBSDEProblem",
    "contraction_norm", "picard_sweep", "solution_residual",
    "solve_continuation", "solve_level",
    "LITERAL", "PROOF_SUFFICIENT", "check_duality", "check_form_equivalence",
    "check_lipschitz", "check_monotonicity", "check_qv_consistency",
    "__version__",
]
