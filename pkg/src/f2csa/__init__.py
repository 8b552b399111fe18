"""Fully first-order constrained stochastic bilevel optimization.

Penalty-based stochastic hypergradient oracle for linearly constrained lower
levels, a clipped nonsmooth outer loop with Goldstein block diagnostics,
exact verification oracles on a synthetic quadratic family, and a seeded
benchmark harness.
"""

__version__ = "0.1.0"

from .errors import (DegenerateActiveSetError, DivergenceError, LicqError,
                     NonconvexPenaltyError, SolverError)
from .problem import (BilevelProblem, LinearConstraints, LowerLevelSolution,
                      UpperSet, box_constraints, constraint_values,
                      instance_hash, load_problem, project_upper,
                      sample_gradients, save_problem)
from .quadratics import (QuadraticInstance, F_true, curvature_estimate,
                         exact_hypergradient, exact_lower_solve, generate,
                         lf_estimate)
from .spd import SpdConfig, estimate_duals_from_primal, spd_solve
from .penalty import (ActivationState, HypergradientEstimate, PenaltyConfig,
                      build_activation, grad_x_penalty, grad_y_penalty,
                      hypergradient, minimize_penalty, penalty_value,
                      sigma_h, sigma_lambda)
from .outer import (CalibrationConstants, OuterConfig, OuterLoopError,
                    RunTrace, calibrate, clip, goldstein_gap_estimate, run,
                    smoothed_block_gaps)
from .verify import (BiasVarianceReport, ProbeCell, bias_probe,
                     implicit_gradient_baseline, mse_check, variance_probe)

__all__ = [name for name in dir() if not name.startswith("_")]
