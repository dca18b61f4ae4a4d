"""Shared builders for small randomized test models."""

import numpy as np
import pytest
import scipy.sparse as sp

from stinla.model import (
    ModelSpec,
    path_graph_spatial,
    uniform_grid_temporal,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_spd_sparse(rng, dim, jitter=1.0):
    """Dense-backed random SPD matrix as CSR (small dims only)."""
    q = rng.normal(size=(dim, dim))
    dense = q @ q.T + (dim + jitter) * np.eye(dim)
    return sp.csr_matrix(dense)


def make_spec(
    n_processes=1,
    n_spatial=3,
    n_time=3,
    n_fixed=1,
    m_per_process=0,
    seed=0,
    fixed_effect_precision=1e-3,
):
    """ModelSpec on the deterministic synthetic discretizations, optionally
    with random point-observation designs."""
    rng = np.random.default_rng(seed)
    spatial = [path_graph_spatial(n_spatial) for _ in range(n_processes)]
    temporal = [uniform_grid_temporal(n_time) for _ in range(n_processes)]
    design, observations = [], []
    latent = n_spatial * n_time + n_fixed
    if m_per_process:
        for _ in range(n_processes):
            rows = np.arange(m_per_process)
            cols = rng.integers(0, n_spatial * n_time, size=m_per_process)
            vals = np.ones(m_per_process)
            a = sp.coo_matrix((vals, (rows, cols)), shape=(m_per_process, latent))
            if n_fixed:
                cov = sp.coo_matrix(
                    (
                        rng.normal(size=m_per_process * n_fixed),
                        (
                            np.repeat(rows, n_fixed),
                            np.tile(
                                n_spatial * n_time + np.arange(n_fixed), m_per_process
                            ),
                        ),
                    ),
                    shape=(m_per_process, latent),
                )
                a = a + cov
            design.append(a.tocsr())
            observations.append(rng.normal(size=m_per_process))
    return ModelSpec(
        n_processes=n_processes,
        n_spatial=n_spatial,
        n_time=n_time,
        n_fixed=n_fixed,
        spatial=spatial,
        temporal=temporal,
        design=design,
        observations=observations,
        fixed_effect_precision=fixed_effect_precision,
    ).validate()
