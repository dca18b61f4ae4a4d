"""Dense reference implementations used as independent oracles.

Everything here works on densified matrices through numpy's generic routines
(Cholesky, slogdet, inv, solve) and never touches the structured solver or
the scatter machinery, so agreement between the two paths is evidence for
both.  Intended for cross-checks on small instances only.
"""

import numpy as np
import scipy.sparse as sp

from .inla import LOG_2PI, HyperParams
from .model import build_univariate_prior


def dense_mixing(scales, couplings):
    """Mixing coefficient matrix from its defining row recursion."""
    scales = np.asarray(scales, dtype=np.float64)
    n = scales.size
    rows = np.zeros((n, n))
    rows[0, 0] = scales[0]
    lam = iter(np.asarray(couplings, dtype=np.float64))
    for i in range(1, n):
        row = np.zeros(n)
        row[i] = scales[i]
        for j in range(i - 1, -1, -1):
            row += next(lam) * rows[j]
        rows[i] = row
    return rows


def dense_joint_precision(spec, theta):
    """Densified joint prior precision via explicit mixing inverses."""
    hp = theta if isinstance(theta, HyperParams) else HyperParams(theta, spec.n_processes)
    qs = [
        build_univariate_prior(spec, hp.process_hypers(i), i).toarray()
        for i in range(spec.n_processes)
    ]
    if spec.n_processes == 1:
        return qs[0]
    coreg = hp.coregionalization()
    mix = dense_mixing(coreg.scales, coreg.couplings)
    mix_inv = np.linalg.inv(np.kron(mix, np.eye(spec.latent_per_process)))
    blockdiag = sp.block_diag([sp.csr_matrix(q) for q in qs]).toarray()
    return mix_inv.T @ blockdiag @ mix_inv


def dense_lmc_covariance(precisions, scales, couplings):
    """Covariance of the mixed process: mixing times the block-diagonal
    univariate covariances times the mixing transpose."""
    covs = [np.linalg.inv(np.asarray(q.toarray() if sp.issparse(q) else q)) for q in precisions]
    dim = covs[0].shape[0]
    mix = np.kron(dense_mixing(scales, couplings), np.eye(dim))
    return mix @ sp.block_diag(covs).toarray() @ mix.T


def dense_objective(spec, theta, prior):
    """Dense re-evaluation of the objective: prior density, Gaussian
    likelihood, latent prior density and Gaussian-conditional correction at
    the conditional mean, all through numpy dense linear algebra."""
    hp = theta if isinstance(theta, HyperParams) else HyperParams(theta, spec.n_processes)
    prior_mat = dense_joint_precision(spec, hp)
    dim = prior_mat.shape[0]

    if spec.design:
        design = sp.block_diag(spec.design).toarray()
        obs = np.concatenate([np.asarray(y, dtype=np.float64) for y in spec.observations])
        counts = [a.shape[0] for a in spec.design]
        noise = np.repeat(hp.noise_precisions(), counts)
    else:
        design = np.zeros((0, dim))
        obs = np.zeros(0)
        noise = np.zeros(0)

    cond = prior_mat + design.T @ np.diag(noise) @ design
    mu = np.linalg.solve(cond, design.T @ (noise * obs)) if obs.size else np.zeros(dim)

    value = prior.log_density(hp.values)
    if obs.size:
        resid = obs - design @ mu
        active = noise > 0
        value += 0.5 * (
            np.sum(np.log(noise[active])) - np.sum(noise[active] * resid[active] ** 2)
        )
        value -= 0.5 * np.count_nonzero(active) * LOG_2PI
    sign_p, logdet_p = np.linalg.slogdet(prior_mat)
    sign_c, logdet_c = np.linalg.slogdet(cond)
    if sign_p <= 0 or sign_c <= 0:
        return -np.inf, None
    value += 0.5 * logdet_p - 0.5 * float(mu @ prior_mat @ mu) - 0.5 * logdet_c
    return value, mu


def dense_posterior_sd(spec, theta):
    """Posterior latent standard deviations from the dense inverse of the
    conditional precision."""
    hp = theta if isinstance(theta, HyperParams) else HyperParams(theta, spec.n_processes)
    cond = dense_joint_precision(spec, hp)
    if spec.design:
        design = sp.block_diag(spec.design).toarray()
        counts = [a.shape[0] for a in spec.design]
        noise = np.repeat(hp.noise_precisions(), counts)
        cond = cond + design.T @ np.diag(noise) @ design
    return np.sqrt(np.diagonal(np.linalg.inv(cond)))
