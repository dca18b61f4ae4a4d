"""Spatio-temporal Bayesian inference on block-tridiagonal-arrowhead solvers.

Library layout mirrors the pipeline: ``model`` builds univariate precision
matrices, ``coreg`` assembles and permutes the joint multivariate precision,
``bta``/``bta_dist`` are the sequential and partitioned structured solvers,
``inla`` runs the inference loop, ``sched`` supplies the layered worker
allocation, and ``cli`` exposes it all as commands.
"""

from .bta import BTAMatrix, FactorizationError, OpCounter, factorize, logdet, selected_invert, solve
from .bta_dist import (
    PartitionPlan,
    PlanError,
    d_factorize,
    d_logdet,
    d_selected_invert,
    d_solve,
    plan_partitions,
)
from .coreg import Coregionalization, PermutationMap, assemble_joint_precision, build_permutation, map_to_bta
from .inla import (
    HyperParams,
    ObjectiveEvaluator,
    PosteriorSummary,
    ThetaPrior,
    eval_objective,
    fd_gradient,
    fd_hessian,
    fit,
    latent_marginals,
    load_balance_ratio,
    minimize,
    predict,
)
from .model import (
    ModelSpec,
    SpatialDiscretization,
    TemporalDiscretization,
    UnivariateHypers,
    build_conditional_precision,
    build_univariate_prior,
    joint_dimension,
)
from .sched import LayerAllocation, TaskRunner, allocate, n_objective_tasks, run_tasks
from .synthetic import SyntheticSettings, generate_synthetic

__version__ = "0.1.0"
