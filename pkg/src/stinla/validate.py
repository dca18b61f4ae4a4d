"""Randomized oracle suite behind the ``validate`` command.

Each check pits a structured-solver code path against an independent dense
reference on freshly drawn small instances.  All randomness flows from one
seed, so a report is reproducible; any failed property is a defect signal,
and the optional permutation-corruption hook exists to prove the checks can
fail (negative control).
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import bta, bta_dist
from .bta import BTAMatrix, random_spd_bta
from .coreg import Coregionalization, assemble_joint_precision, build_permutation, map_to_bta
from .inla import HyperParams, ObjectiveEvaluator
from .model import ModelSpec, path_graph_spatial, uniform_grid_temporal
from .reference import dense_lmc_covariance, dense_objective, dense_posterior_sd
from .synthetic import SyntheticSettings, build_spec


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self):
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.name}: {self.detail}"


def _spd_instances(rng, count):
    for _ in range(count):
        n = int(rng.integers(1, 8))
        b = int(rng.integers(1, 6))
        a = int(rng.integers(0, 5))
        yield random_spd_bta(rng, n, b, a)


def _pattern_mask(n, b, a):
    dim = n * b + a
    mask = np.zeros((dim, dim), dtype=bool)
    for i in range(n):
        mask[i * b : (i + 1) * b, i * b : (i + 1) * b] = True
        if i < n - 1:
            mask[(i + 1) * b : (i + 2) * b, i * b : (i + 1) * b] = True
            mask[i * b : (i + 1) * b, (i + 1) * b : (i + 2) * b] = True
    if a > 0:
        mask[n * b :, :] = True
        mask[:, n * b :] = True
    return mask


def check_solver_oracles(rng, trials=25):
    """Factorization, determinant, solve and selected inverse versus numpy."""
    worst = 0.0
    for matrix in _spd_instances(rng, trials):
        dense = matrix.to_dense()
        factor = bta.factorize(matrix.copy())
        low = np.tril(factor.matrix.to_dense())
        worst = max(worst, np.abs(low @ low.T - dense).max() / max(np.abs(dense).max(), 1.0))
        worst = max(
            worst,
            abs(bta.logdet(factor) - np.linalg.slogdet(dense)[1])
            / max(abs(np.linalg.slogdet(dense)[1]), 1.0),
        )
        rhs = rng.normal(size=matrix.dim)
        x = bta.solve(factor, rhs)
        worst = max(worst, np.linalg.norm(dense @ x - rhs) / np.linalg.norm(rhs))
        inv = bta.selected_invert(factor)
        dense_inv = np.linalg.inv(dense)
        mask = _pattern_mask(matrix.n_blocks, matrix.block_size, matrix.arrow_size)
        err = np.abs(inv.to_dense() - dense_inv)[mask]
        scale = np.maximum(np.abs(dense_inv), 1e-12)[mask]
        worst = max(worst, float((err / scale).max()))
    return CheckResult(
        "solver_dense_oracles", worst <= 1e-8, f"worst relative error {worst:.2e}"
    )


def check_distributed_equivalence(rng, trials=12):
    """Partitioned routines versus the sequential ones."""
    worst = 0.0
    for _ in range(trials):
        p = int(rng.integers(2, 5))
        n = int(rng.integers(2 * p, 25))
        b = int(rng.integers(1, 5))
        a = int(rng.integers(0, 4))
        lb = float(rng.choice([1.0, 1.6]))
        matrix = random_spd_bta(rng, n, b, a)
        plan = bta_dist.plan_partitions(n, p, lb)
        seq = bta.factorize(matrix.copy())
        dist = bta_dist.d_factorize(matrix.copy(), plan)
        worst = max(
            worst,
            abs(bta_dist.d_logdet(dist) - bta.logdet(seq)) / max(abs(bta.logdet(seq)), 1.0),
        )
        rhs = rng.normal(size=matrix.dim)
        x_seq = bta.solve(seq, rhs)
        worst = max(
            worst,
            np.linalg.norm(bta_dist.d_solve(dist, rhs) - x_seq) / np.linalg.norm(x_seq),
        )
        inv_seq = bta.selected_invert(seq)
        inv_dist = bta_dist.d_selected_invert(dist)
        scale = np.maximum(np.abs(inv_seq.data), 1e-12)
        worst = max(worst, float((np.abs(inv_dist.data - inv_seq.data) / scale).max()))
    return CheckResult(
        "distributed_equivalence", worst <= 1e-8, f"worst relative error {worst:.2e}"
    )


def _random_precisions(rng, n_v, dim):
    out = []
    for _ in range(n_v):
        q = rng.normal(size=(dim, dim))
        out.append(sp.csr_matrix(q @ q.T + (dim + 1.0) * np.eye(dim)))
    return out


def check_mixing_duality(rng, trials=10):
    """Inverse of the assembled joint precision equals the mixed covariance."""
    worst = 0.0
    for _ in range(trials):
        dim = int(rng.integers(2, 7))
        scales = rng.uniform(0.5, 2.0, size=3)
        couplings = rng.normal(size=3)
        qs = _random_precisions(rng, 3, dim)
        joint = assemble_joint_precision(qs, Coregionalization(scales, couplings))
        cov = dense_lmc_covariance(qs, scales, couplings)
        err = np.linalg.norm(np.linalg.inv(joint.toarray()) - cov) / np.linalg.norm(cov)
        worst = max(worst, float(err))
    return CheckResult("mixing_duality", worst <= 1e-8, f"worst Frobenius error {worst:.2e}")


def _corrupt(pmap):
    pmap.forward[[0, -1]] = pmap.forward[[-1, 0]]
    pmap.backward = np.argsort(pmap.forward)
    pmap._bound = None
    return pmap


def check_permutation_similarity(rng, trials=8, corrupt=False):
    """Permuted matrix keeps the spectrum and fits the BTA envelope."""
    worst = 0.0
    for _ in range(trials):
        n_v = int(rng.integers(1, 4))
        spec = _tiny_spec(rng, n_v)
        theta = rng.normal(scale=0.3, size=HyperParams.dim_for(n_v))
        evaluator = ObjectiveEvaluator(spec)
        hp = HyperParams(theta, n_v)
        joint = evaluator._prior_matrix(hp)
        pmap = build_permutation(spec)
        if corrupt:
            _corrupt(pmap)
        permuted = pmap.permuted_matrix(joint).toarray()
        eig_err = np.abs(
            np.sort(np.linalg.eigvalsh(permuted)) - np.sort(np.linalg.eigvalsh(joint.toarray()))
        ).max()
        worst = max(worst, float(eig_err))
        workspace = BTAMatrix(pmap.n_blocks, pmap.block_size, pmap.arrow_size)
        try:
            map_to_bta(joint, pmap, workspace)
            round_trip = np.abs(workspace.to_dense() - permuted).max()
        except Exception:
            round_trip = np.inf
        worst = max(worst, float(round_trip))
        n, b, a = pmap.n_blocks, pmap.block_size, pmap.arrow_size
        if n * b + a != spec.joint_dim:
            worst = np.inf
    return CheckResult(
        "permutation_similarity", worst <= 1e-9, f"worst deviation {worst:.2e}"
    )


def _tiny_spec(rng, n_v, with_data=True):
    settings = SyntheticSettings(
        n_processes=n_v,
        n_spatial=int(rng.integers(2, 4)),
        n_time=int(rng.integers(2, 4)),
        n_fixed=int(rng.integers(0, 3)),
        observations_per_process=int(rng.integers(4, 9)) if with_data else 0,
    )
    spec = build_spec(settings, rng)
    if with_data:
        spec.observations = [
            rng.normal(size=settings.observations_per_process)
            for _ in range(n_v)
        ]
    else:
        spec.design = []
        spec.observations = []
    return spec


def check_objective_dense_oracle(rng, trials=8, corrupt=False):
    """Structured objective evaluation versus the dense re-implementation."""
    worst = 0.0
    for _ in range(trials):
        n_v = int(rng.integers(1, 4))
        spec = _tiny_spec(rng, n_v)
        theta = rng.normal(scale=0.25, size=HyperParams.dim_for(n_v))
        evaluator = ObjectiveEvaluator(spec)
        try:
            if corrupt:
                _corrupt(evaluator.pmap)
                evaluator._bound_prior = evaluator.pmap.bind(
                    evaluator._prior_matrix(HyperParams(theta, n_v))
                )
            f, _ = evaluator.evaluate(theta)
            f_ref, _ = dense_objective(spec, theta, evaluator.prior)
            worst = max(worst, float(abs(f - f_ref)))
        except Exception:
            worst = np.inf
    return CheckResult(
        "objective_dense_oracle", worst <= 1e-8, f"worst absolute error {worst:.2e}"
    )


def check_marginals_dense_oracle(rng, trials=6):
    """Selected-inversion marginal standard deviations versus dense inverse."""
    worst = 0.0
    for _ in range(trials):
        n_v = int(rng.integers(1, 4))
        spec = _tiny_spec(rng, n_v)
        theta = rng.normal(scale=0.25, size=HyperParams.dim_for(n_v))
        evaluator = ObjectiveEvaluator(spec)
        _, sd = evaluator.latent_marginals(theta)
        ref = dense_posterior_sd(spec, theta)
        worst = max(worst, float(np.abs(sd / ref - 1.0).max()))
    return CheckResult(
        "marginals_dense_oracle", worst <= 1e-8, f"worst relative error {worst:.2e}"
    )


def run_validation(seed, corrupt_permutation=False):
    """Run every property check; returns the list of results."""
    rng = np.random.default_rng(seed)
    return [
        check_solver_oracles(rng),
        check_distributed_equivalence(rng),
        check_mixing_duality(rng),
        check_permutation_similarity(rng, corrupt=corrupt_permutation),
        check_objective_dense_oracle(rng, corrupt=corrupt_permutation),
        check_marginals_dense_oracle(rng),
    ]
