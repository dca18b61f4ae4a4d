"""Posterior inference pipeline: objective evaluation, quasi-Newton mode
search with central-difference gradients, Hessian at the mode, and latent
marginals via selected inversion.

The objective is the log posterior density of the hyperparameters (up to a
constant): hyperparameter prior plus Gaussian likelihood plus latent prior
density minus the Gaussian conditional density, all evaluated at the
conditional mean, where the two high-dimensional terms reduce to the
log-determinants of the prior and conditional precision factorizations.
"""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import bta, bta_dist
from .bta import BTAMatrix, FactorizationError
from .coreg import (
    Coregionalization,
    PermutationMap,
    assemble_joint_precision,
    build_permutation,
    map_to_bta,
)
from .model import DimensionError, UnivariateHypers, build_univariate_prior
from .sched import TaskError

LOG_2PI = np.log(2.0 * np.pi)


def load_balance_ratio(block_size, arrow_size):
    """Asymptotic extra-work ratio of the conditional factorization relative
    to the prior's, (arrow_size / block_size)**3."""
    return float(arrow_size) ** 3 / float(block_size) ** 3


class HyperParams:
    """The hyperparameter vector and its fixed layout.

    Univariate models use four entries: log spatial scale, log temporal
    scale, log variance scale, log noise precision.  Coregional models use
    two SPDE entries per process (the variance scale is delegated to the
    mixing scales), then one log noise precision per response, one log mixing
    scale per process, and the unconstrained couplings.
    """

    def __init__(self, values, n_processes):
        values = np.asarray(values, dtype=np.float64).ravel()
        expected = self.dim_for(n_processes)
        if values.size != expected:
            raise DimensionError(
                f"{n_processes}-process model needs {expected} hyperparameters, "
                f"got {values.size}"
            )
        self.values = values
        self.n_processes = n_processes

    @staticmethod
    def dim_for(n_processes):
        if n_processes == 1:
            return 4
        return 4 * n_processes + n_processes * (n_processes - 1) // 2

    @property
    def dim(self):
        return self.values.size

    def process_hypers(self, i):
        v = self.values
        if self.n_processes == 1:
            return UnivariateHypers(v[0], v[1], v[2], v[3])
        return UnivariateHypers(
            v[2 * i], v[2 * i + 1], 0.0, v[2 * self.n_processes + i]
        )

    def noise_precisions(self):
        if self.n_processes == 1:
            return np.exp(self.values[3:4])
        nv = self.n_processes
        return np.exp(self.values[2 * nv : 3 * nv])

    def coregionalization(self):
        if self.n_processes == 1:
            return None
        nv = self.n_processes
        scales = np.exp(self.values[3 * nv : 4 * nv])
        couplings = self.values[4 * nv :]
        return Coregionalization(scales, couplings)

    def names(self):
        if self.n_processes == 1:
            return [
                "log_spatial_scale",
                "log_temporal_scale",
                "log_variance_scale",
                "log_noise_precision",
            ]
        nv = self.n_processes
        out = []
        for i in range(nv):
            out += [f"log_spatial_scale_{i}", f"log_temporal_scale_{i}"]
        out += [f"log_noise_precision_{i}" for i in range(nv)]
        out += [f"log_scale_{i}" for i in range(nv)]
        out += [f"coupling_{k}" for k in range(nv * (nv - 1) // 2)]
        return out


@dataclass
class ThetaPrior:
    """Independent Gaussian priors on the (log-parametrized) hyperparameters."""

    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.sd = np.broadcast_to(
            np.asarray(self.sd, dtype=np.float64), self.mean.shape
        ).copy()
        if np.any(self.sd <= 0):
            raise ValueError("prior standard deviations must be positive")

    @classmethod
    def for_dim(cls, dim, mean=None, sd=10.0):
        mean = np.zeros(dim) if mean is None else np.asarray(mean, dtype=np.float64)
        return cls(mean=mean, sd=np.full(dim, float(sd)))

    def log_density(self, theta):
        z = (np.asarray(theta) - self.mean) / self.sd
        return float(
            -0.5 * np.sum(z**2) - np.sum(np.log(self.sd)) - 0.5 * self.mean.size * LOG_2PI
        )


class ObjectiveEvaluator:
    """Precompiled model structure for repeated objective evaluations.

    Construction fixes everything that does not change with the
    hyperparameters: the joint sparsity patterns, the time-major permutation
    with its per-nonzero scatter offsets, the per-response Gram matrices of
    the design, and the partition plan.  Evaluations allocate their own
    block-dense workspaces, so concurrent calls from the gradient layer are
    safe.
    """

    def __init__(
        self,
        spec,
        prior=None,
        partitions=1,
        lb=1.0,
        pair_runner=None,
        calibrate_variance=False,
    ):
        spec.validate()
        self.spec = spec
        self.n_processes = spec.n_processes
        self.theta_dim = HyperParams.dim_for(spec.n_processes)
        self.prior = prior if prior is not None else ThetaPrior.for_dim(self.theta_dim)
        if self.prior.mean.size != self.theta_dim:
            raise DimensionError("prior dimension does not match the hyperparameter layout")
        self.pair_runner = pair_runner

        self.pmap = build_permutation(spec)
        dim = spec.joint_dim
        if spec.design:
            self.design = sp.block_diag(spec.design, format="csr")
            self.observations = np.concatenate(
                [np.asarray(y, dtype=np.float64) for y in spec.observations]
            )
            counts = [a.shape[0] for a in spec.design]
            self.obs_counts = np.array(counts)
        else:
            self.design = sp.csr_matrix((0, dim))
            self.observations = np.zeros(0)
            self.obs_counts = np.zeros(spec.n_processes, dtype=int)
        self.n_observations = int(self.obs_counts.sum())

        if partitions > 1:
            self.plan = bta_dist.plan_partitions_with_fallback(
                spec.n_time, partitions, lb
            )
        else:
            self.plan = None

        self.calibration = np.zeros(spec.n_processes)
        if calibrate_variance:
            self.calibration = np.array(
                [self._calibration_offset(i) for i in range(spec.n_processes)]
            )

        # per-response Gram matrices of the design, embedded in joint indices
        grams = []
        if self.n_observations:
            per = spec.latent_per_process
            for i, a in enumerate(spec.design):
                gram = (a.T @ a).tocsr()
                gram = ((gram + gram.T) * 0.5).tocoo()
                grams.append((gram.row + i * per, gram.col + i * per, gram.data))
        self._grams = grams

        # freeze the structural patterns and their scatter offsets
        theta_ref = HyperParams(np.zeros(self.theta_dim), spec.n_processes)
        prior_ref = self._prior_matrix(theta_ref)
        self._prior_nnz = prior_ref.nnz
        prior_coo = prior_ref.tocoo()
        self._qc_rows = np.concatenate(
            [prior_coo.row] + [g[0] for g in grams]
        ) if grams else None
        self._qc_cols = np.concatenate(
            [prior_coo.col] + [g[1] for g in grams]
        ) if grams else None
        cond_ref = self._conditional_matrix(theta_ref, prior_ref)
        self._cond_nnz = cond_ref.nnz
        self._bound_prior = self.pmap.bind(prior_ref)
        self._bound_cond = self.pmap.bind(cond_ref)

    # -- matrix assembly -------------------------------------------------

    def _hypers(self, theta):
        if isinstance(theta, HyperParams):
            return theta
        return HyperParams(theta, self.n_processes)

    def _process_hypers(self, hp, i):
        base = hp.process_hypers(i)
        if self.calibration[i] == 0.0:
            return base
        return UnivariateHypers(
            base.log_spatial_scale,
            base.log_temporal_scale,
            base.log_variance_scale + self.calibration[i],
            base.log_noise_precision,
        )

    def _calibration_offset(self, i):
        """log multiplier making the unit-hyper prior marginal variance one."""
        spec = self.spec
        unit = UnivariateHypers(0.0, 0.0, 0.0, 0.0)
        q = build_univariate_prior(spec, unit, i)
        pmap_one = PermutationMap(1, spec.n_spatial, spec.n_time, spec.n_fixed)
        ws = BTAMatrix(pmap_one.n_blocks, pmap_one.block_size, pmap_one.arrow_size)
        map_to_bta(q, pmap_one, ws)
        inv = bta.selected_invert(bta.factorize(ws))
        st_var = np.concatenate([np.diagonal(inv.diag[t]) for t in range(spec.n_time)])
        return float(np.log(np.mean(st_var)))

    def _prior_matrix(self, hp):
        qs = [
            build_univariate_prior(self.spec, self._process_hypers(hp, i), i)
            for i in range(self.n_processes)
        ]
        if self.n_processes == 1:
            return qs[0]
        return assemble_joint_precision(qs, hp.coregionalization())

    def _noise_diag(self, hp):
        taus = hp.noise_precisions()
        return np.repeat(taus, self.obs_counts)

    def _conditional_matrix(self, hp, prior_matrix):
        if not self._grams:
            return prior_matrix.copy()
        if self._qc_rows is not None and prior_matrix.nnz != self._prior_nnz:
            raise RuntimeError("prior pattern drifted between evaluations")
        taus = hp.noise_precisions()
        datas = [prior_matrix.data] + [taus[i] * g[2] for i, g in enumerate(self._grams)]
        if self._qc_rows is None:
            coo = prior_matrix.tocoo()
            rows = np.concatenate([coo.row] + [g[0] for g in self._grams])
            cols = np.concatenate([coo.col] + [g[1] for g in self._grams])
        else:
            rows, cols = self._qc_rows, self._qc_cols
        dim = self.spec.joint_dim
        out = sp.coo_matrix(
            (np.concatenate(datas), (rows, cols)), shape=(dim, dim)
        ).tocsr()
        out.sum_duplicates()
        out.sort_indices()
        return out

    # -- factorization plumbing ------------------------------------------

    def _workspace(self):
        return BTAMatrix(self.pmap.n_blocks, self.pmap.block_size, self.pmap.arrow_size)

    def _factorize(self, workspace, counter=None):
        if self.plan is not None and self.plan.n_partitions > 1:
            return bta_dist.d_factorize(workspace, self.plan, counter=counter)
        return bta.factorize(workspace, counter=counter)

    def _logdet(self, factor):
        if isinstance(factor, bta_dist.DistBTAFactor):
            return bta_dist.d_logdet(factor)
        return bta.logdet(factor)

    def _solve(self, factor, rhs):
        if isinstance(factor, bta_dist.DistBTAFactor):
            return bta_dist.d_solve(factor, rhs)
        return bta.solve(factor, rhs)

    def _selected_invert(self, factor):
        if isinstance(factor, bta_dist.DistBTAFactor):
            return bta_dist.d_selected_invert(factor)
        return bta.selected_invert(factor)

    def _conditional_mean(self, hp, cond_factor):
        if self.n_observations == 0:
            return np.zeros(self.spec.joint_dim)
        noise = self._noise_diag(hp)
        rhs = self.design.T @ (noise * self.observations)
        mu_perm = self._solve(cond_factor, self.pmap.permute_vector(rhs))
        return self.pmap.restore_vector(mu_perm)

    # -- objective --------------------------------------------------------

    def evaluate(self, theta, counters=None):
        """Objective value and conditional mean at one hyperparameter point.

        Returns ``(-inf, None)`` when a factorization hits an indefinite
        pivot, the infeasible-proposal signal the optimizer rejects.
        """
        hp = self._hypers(theta)
        if not np.all(np.isfinite(hp.values)):
            return -np.inf, None
        prior_matrix = self._prior_matrix(hp)
        cond_matrix = self._conditional_matrix(hp, prior_matrix)

        def prior_task():
            ws = self._workspace()
            map_to_bta(prior_matrix, self.pmap, ws, bound=self._bound_prior)
            counter = counters.get("prior") if counters else None
            return self._logdet(self._factorize(ws, counter=counter))

        def cond_task():
            ws = self._workspace()
            map_to_bta(cond_matrix, self.pmap, ws, bound=self._bound_cond)
            counter = counters.get("conditional") if counters else None
            factor = self._factorize(ws, counter=counter)
            return self._logdet(factor), self._conditional_mean(hp, factor)

        try:
            if self.pair_runner is not None:
                logdet_prior, (logdet_cond, mu) = self.pair_runner(
                    [prior_task, cond_task]
                )
            else:
                logdet_prior = prior_task()
                logdet_cond, mu = cond_task()
        except FactorizationError:
            return -np.inf, None
        except TaskError as err:
            if isinstance(err.__cause__, FactorizationError):
                return -np.inf, None
            raise

        value = self.prior.log_density(hp.values)
        if self.n_observations:
            noise = self._noise_diag(hp)
            resid = self.observations - self.design @ mu
            active = noise > 0
            value += 0.5 * (
                np.sum(np.log(noise[active])) - np.sum(noise[active] * resid[active] ** 2)
            )
            value -= 0.5 * np.count_nonzero(active) * LOG_2PI
        value += 0.5 * logdet_prior - 0.5 * float(mu @ (prior_matrix @ mu))
        value -= 0.5 * logdet_cond
        return value, mu

    def objective(self, theta):
        return self.evaluate(theta)[0]

    def latent_marginals(self, theta):
        """Conditional mean and marginal standard deviations at ``theta``.

        The variances are the diagonal of the selected inverse of the
        conditional precision, read off the diagonal blocks and the tip and
        mapped back to variable-major order.
        """
        hp = self._hypers(theta)
        prior_matrix = self._prior_matrix(hp)
        cond_matrix = self._conditional_matrix(hp, prior_matrix)
        ws = self._workspace()
        map_to_bta(cond_matrix, self.pmap, ws, bound=self._bound_cond)
        factor = self._factorize(ws)
        mu = self._conditional_mean(hp, factor)
        inv = self._selected_invert(factor)
        pieces = [np.diagonal(inv.diag[t]) for t in range(self.pmap.n_blocks)]
        if self.pmap.arrow_size:
            pieces.append(np.diagonal(inv.tip))
        variances = self.pmap.restore_vector(np.concatenate(pieces))
        return mu, np.sqrt(variances)


def eval_objective(theta, model):
    """Objective and conditional mean; ``model`` is a ModelSpec or a
    prebuilt :class:`ObjectiveEvaluator`."""
    evaluator = model if isinstance(model, ObjectiveEvaluator) else ObjectiveEvaluator(model)
    return evaluator.evaluate(theta)


def _scalar_function(objective):
    """Adapt callables, evaluators and model specs to a scalar function to
    minimize (model objectives are negated: the mode maximizes them)."""
    if callable(objective) and not isinstance(objective, ObjectiveEvaluator):
        return objective
    evaluator = (
        objective
        if isinstance(objective, ObjectiveEvaluator)
        else ObjectiveEvaluator(objective)
    )
    return lambda theta: -evaluator.objective(theta)


def fd_gradient(fun, theta, step=1e-3, runner=None):
    """Central-difference gradient; the central point and the two points per
    coordinate are independent tasks reduced in coordinate order.

    Returns ``(f(theta), gradient)``.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    fun = _scalar_function(fun)
    theta = np.asarray(theta, dtype=np.float64)
    points = [theta.copy()]
    for i in range(theta.size):
        for sign in (+1.0, -1.0):
            p = theta.copy()
            p[i] += sign * step
            points.append(p)
    tasks = [lambda p=p: fun(p) for p in points]
    values = np.asarray(runner(tasks) if runner is not None else [t() for t in tasks])
    grad = (values[1::2] - values[2::2]) / (2.0 * step)
    return float(values[0]), grad


def fd_hessian(fun, theta, step=1e-2, runner=None):
    """Second-order central-difference Hessian (four-point cross stencil on
    the off-diagonal), symmetrized by averaging."""
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    fun = _scalar_function(fun)
    theta = np.asarray(theta, dtype=np.float64)
    d = theta.size
    points = [theta.copy()]
    for i in range(d):
        for sign in (+1.0, -1.0):
            p = theta.copy()
            p[i] += sign * step
            points.append(p)
    cross = []
    for i in range(d):
        for j in range(i + 1, d):
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                p = theta.copy()
                p[i] += si * step
                p[j] += sj * step
                points.append(p)
                cross.append((i, j))
    tasks = [lambda p=p: fun(p) for p in points]
    values = np.asarray(runner(tasks) if runner is not None else [t() for t in tasks])

    f0 = values[0]
    hess = np.zeros((d, d))
    for i in range(d):
        fp, fm = values[1 + 2 * i], values[2 + 2 * i]
        hess[i, i] = (fp - 2.0 * f0 + fm) / step**2
    base = 1 + 2 * d
    for k in range(0, len(cross), 4):
        i, j = cross[k]
        fpp, fpm, fmp, fmm = values[base + k : base + k + 4]
        hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * step**2)
    return 0.5 * (hess + hess.T)


@dataclass
class IterationRecord:
    iteration: int
    f: float
    grad_norm: float
    step: float
    f_evals: int
    seconds: float


@dataclass
class MinimizeResult:
    theta: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    f_evals: int
    status: str
    trace: list = field(default_factory=list)

    @property
    def converged(self):
        return self.status.startswith("converged")


def minimize(
    objective,
    theta0,
    gtol=1e-3,
    ftol=1e-6,
    max_iter=100,
    grad_step=1e-3,
    runner=None,
    c1=1e-4,
    shrink=0.5,
    max_backtracks=20,
):
    """Quasi-Newton (inverse-Hessian update) minimization with a backtracking
    sufficient-decrease line search and central-difference gradients.

    ``objective`` may be a plain callable, a ModelSpec or an
    ObjectiveEvaluator; model objectives are negated so their mode is the
    minimizer.  Terminates on the max-norm of the gradient, on relative
    decrease of the objective, or after ``max_iter`` iterations (returning
    the best iterate with a warning status).
    """
    fun = _scalar_function(objective)
    theta = np.asarray(theta0, dtype=np.float64).copy()
    dim = theta.size

    f, grad = fd_gradient(fun, theta, grad_step, runner)
    f_evals = 2 * dim + 1
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the starting point")

    hess_inv = np.eye(dim)
    trace = []
    status = "max_iterations"

    for iteration in range(1, max_iter + 1):
        if not np.all(np.isfinite(grad)):
            status = "invalid_gradient"
            break
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm <= gtol:
            status = "converged"
            break

        tic = time.perf_counter()
        direction = -(hess_inv @ grad)
        slope = float(grad @ direction)
        if slope >= 0:  # safeguard against a corrupted curvature estimate
            hess_inv = np.eye(dim)
            direction = -grad
            slope = -float(grad @ grad)

        step = 1.0
        accepted = False
        line_evals = 0
        for _ in range(max_backtracks + 1):
            candidate = theta + step * direction
            f_cand = fun(candidate)
            line_evals += 1
            if np.isfinite(f_cand) and f_cand <= f + c1 * step * slope:
                accepted = True
                break
            step *= shrink
        f_evals += line_evals
        if not accepted:
            status = "line_search_failed"
            warnings.warn("line search failed to find sufficient decrease", stacklevel=2)
            break

        f_new, grad_new = fd_gradient(fun, candidate, grad_step, runner)
        f_evals += 2 * dim + 1

        delta = candidate - theta
        gamma = grad_new - grad
        curvature = float(gamma @ delta)
        if np.isfinite(curvature) and curvature > 1e-10 * (
            np.linalg.norm(delta) * np.linalg.norm(gamma) + 1e-300
        ):
            rho = 1.0 / curvature
            outer = np.outer(delta, gamma)
            hess_inv = (
                (np.eye(dim) - rho * outer) @ hess_inv @ (np.eye(dim) - rho * outer.T)
                + rho * np.outer(delta, delta)
            )

        f_prev, theta, f, grad = f, candidate, f_new, grad_new
        trace.append(
            IterationRecord(
                iteration=iteration,
                f=f,
                grad_norm=float(np.max(np.abs(grad))),
                step=step,
                f_evals=line_evals + 2 * dim + 1,
                seconds=time.perf_counter() - tic,
            )
        )
        if abs(f_prev - f) <= ftol * max(1.0, abs(f_prev)):
            status = "converged_ftol"
            break

    if status == "max_iterations":
        warnings.warn("maximum iterations reached without convergence", stacklevel=2)
    return MinimizeResult(
        theta=theta,
        f=f,
        grad=grad,
        iterations=len(trace),
        f_evals=f_evals,
        status=status,
        trace=trace,
    )


def latent_marginals(theta, model):
    """Conditional mean and per-component posterior standard deviations."""
    evaluator = model if isinstance(model, ObjectiveEvaluator) else ObjectiveEvaluator(model)
    return evaluator.latent_marginals(theta)


def predict(design_pred, latent_mean):
    """Posterior predictive mean at new locations: the prediction design
    matrix applied to the latent mean (variable-major order)."""
    design_pred = sp.csr_matrix(design_pred)
    latent_mean = np.asarray(latent_mean, dtype=np.float64)
    if design_pred.shape[1] != latent_mean.size:
        raise DimensionError(
            f"prediction design has {design_pred.shape[1]} columns, "
            f"expected {latent_mean.size}"
        )
    return design_pred @ latent_mean


@dataclass
class PosteriorSummary:
    """Mode-centred posterior summary of one fitted model."""

    theta_mode: HyperParams
    theta_sd: np.ndarray
    latent_mean: np.ndarray
    latent_sd: np.ndarray
    logpost_at_mode: float
    iterations: int
    f_evals: int
    status: str
    theta_hessian: np.ndarray


@dataclass
class FitOptions:
    grad_step: float = 1e-3
    hess_step: float = 1e-2
    gtol: float = 1e-3
    ftol: float = 1e-6
    max_iter: int = 100
    prior_sd: float = 10.0
    prior_mean: np.ndarray = None


def fit(
    model,
    theta0,
    options=None,
    runner=None,
    partitions=1,
    lb=1.0,
    pair_runner=None,
    calibrate_variance=False,
):
    """Full pipeline: mode search, Hessian at the mode, latent marginals.

    Returns ``(PosteriorSummary, MinimizeResult)``.  The hyperparameter
    standard deviations come from the inverse Hessian of the negated
    objective; if that Hessian is not positive definite they are reported as
    NaN with a warning.
    """
    options = options or FitOptions()
    theta0 = np.asarray(theta0, dtype=np.float64)
    if isinstance(model, ObjectiveEvaluator):
        evaluator = model
    else:
        prior_mean = options.prior_mean if options.prior_mean is not None else theta0
        evaluator = ObjectiveEvaluator(
            model,
            prior=ThetaPrior.for_dim(theta0.size, mean=prior_mean, sd=options.prior_sd),
            partitions=partitions,
            lb=lb,
            pair_runner=pair_runner,
            calibrate_variance=calibrate_variance,
        )

    result = minimize(
        evaluator,
        theta0,
        gtol=options.gtol,
        ftol=options.ftol,
        max_iter=options.max_iter,
        grad_step=options.grad_step,
        runner=runner,
    )

    hessian = fd_hessian(evaluator, result.theta, options.hess_step, runner)
    dim = result.theta.size
    hess_evals = 1 + 2 * dim + 2 * dim * (dim - 1)
    try:
        np.linalg.cholesky(hessian)  # positive-definiteness gate
        theta_sd = np.sqrt(np.diagonal(np.linalg.inv(hessian)))
    except np.linalg.LinAlgError:
        warnings.warn(
            "Hessian at the mode is not positive definite; "
            "hyperparameter uncertainties unavailable",
            stacklevel=2,
        )
        theta_sd = np.full(dim, np.nan)

    latent_mean, latent_sd = evaluator.latent_marginals(result.theta)
    summary = PosteriorSummary(
        theta_mode=HyperParams(result.theta, evaluator.n_processes),
        theta_sd=theta_sd,
        latent_mean=latent_mean,
        latent_sd=latent_sd,
        logpost_at_mode=-result.f,
        iterations=result.iterations,
        f_evals=result.f_evals + hess_evals,
        status=result.status,
        theta_hessian=hessian,
    )
    return summary, result
