"""Univariate spatio-temporal GMRF precision matrices.

The latent field of one process stacks ``n_time`` copies of the spatial field
(time-major) followed by its fixed effects.  The spatio-temporal precision is
a sum of Kronecker products of the temporal discretization matrices with
powers of the spatial operator, which keeps the matrix block-tridiagonal in
time; the fixed-effect block is a decoupled diagonal prior.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class DimensionError(ValueError):
    """Shapes of discretizations, designs or observations are inconsistent."""


def _check_square(matrix, size, name):
    if matrix.shape != (size, size):
        raise DimensionError(f"{name} has shape {matrix.shape}, expected ({size}, {size})")


def _symmetrized(matrix, name):
    matrix = sp.csr_matrix(matrix)
    gap = abs(matrix - matrix.T)
    if gap.nnz and gap.max() > 1e-10 * max(abs(matrix).max(), 1.0):
        raise ValueError(f"{name} must be symmetric")
    out = (matrix + matrix.T) * 0.5
    out.sum_duplicates()
    out.sort_indices()
    return out


@dataclass
class SpatialDiscretization:
    """Lumped mass matrix (diagonal, positive) and symmetric PSD stiffness."""

    mass: sp.spmatrix
    stiffness: sp.spmatrix

    def __post_init__(self):
        self.mass = sp.csr_matrix(self.mass)
        self.stiffness = _symmetrized(self.stiffness, "spatial stiffness")
        n = self.mass.shape[0]
        _check_square(self.mass, n, "spatial mass")
        _check_square(self.stiffness, n, "spatial stiffness")
        diag = self.mass.diagonal()
        off_diag = self.mass - sp.diags(diag)
        if off_diag.nnz and abs(off_diag).max() > 0:
            raise ValueError("spatial mass matrix must be diagonal (lumped)")
        if np.any(diag <= 0):
            raise ValueError("spatial mass matrix must be strictly positive")

    @property
    def n_nodes(self):
        return self.mass.shape[0]


@dataclass
class TemporalDiscretization:
    """Temporal mass, first-order coupling and second-difference matrices.

    All three have bandwidth at most one; the mass matrix is positive
    diagonal and the second-difference matrix is positive semi-definite.
    """

    mass: sp.spmatrix
    coupling: sp.spmatrix
    stiffness: sp.spmatrix

    def __post_init__(self):
        self.mass = sp.csr_matrix(self.mass)
        n = self.mass.shape[0]
        self.coupling = _symmetrized(self.coupling, "temporal coupling")
        self.stiffness = _symmetrized(self.stiffness, "temporal stiffness")
        for name in ("mass", "coupling", "stiffness"):
            mat = getattr(self, name)
            _check_square(mat, n, f"temporal {name}")
            coo = mat.tocoo()
            if coo.nnz and np.abs(coo.row - coo.col).max() > 1:
                raise ValueError(f"temporal {name} must have bandwidth <= 1")
        diag = self.mass.diagonal()
        if np.any(diag <= 0):
            raise ValueError("temporal mass matrix must be strictly positive")

    @property
    def n_steps(self):
        return self.mass.shape[0]


@dataclass
class UnivariateHypers:
    """Hyperparameters of one spatio-temporal process, log-parametrized."""

    log_spatial_scale: float
    log_temporal_scale: float
    log_variance_scale: float = 0.0
    log_noise_precision: float = 0.0

    @property
    def spatial_scale(self):
        return float(np.exp(self.log_spatial_scale))

    @property
    def temporal_scale(self):
        return float(np.exp(self.log_temporal_scale))

    @property
    def variance_scale(self):
        return float(np.exp(self.log_variance_scale))

    @property
    def noise_precision(self):
        return float(np.exp(self.log_noise_precision))

    def validate(self):
        values = [
            self.log_spatial_scale,
            self.log_temporal_scale,
            self.log_variance_scale,
            self.log_noise_precision,
        ]
        if not np.all(np.isfinite(values)):
            raise ValueError("hyperparameters must be finite (positivity on the natural scale)")


@dataclass
class ModelSpec:
    """Dimensions, discretizations, designs and observations of a model.

    Every process shares the dimensions ``n_spatial``, ``n_time`` and
    ``n_fixed``; design matrix ``design[i]`` maps process i's latent vector of
    length ``n_spatial * n_time + n_fixed`` to its ``m_i`` observations.
    """

    n_processes: int
    n_spatial: int
    n_time: int
    n_fixed: int
    spatial: list = field(default_factory=list)
    temporal: list = field(default_factory=list)
    design: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    fixed_effect_precision: float = 1e-3

    @property
    def latent_per_process(self):
        return self.n_spatial * self.n_time + self.n_fixed

    @property
    def joint_dim(self):
        return self.n_processes * self.latent_per_process

    def validate(self):
        if min(self.n_processes, self.n_spatial, self.n_time) < 1 or self.n_fixed < 0:
            raise DimensionError("model dimensions must be positive (n_fixed >= 0)")
        if len(self.spatial) != self.n_processes or len(self.temporal) != self.n_processes:
            raise DimensionError("one spatial and temporal discretization per process required")
        for i in range(self.n_processes):
            if self.spatial[i].n_nodes != self.n_spatial:
                raise DimensionError(
                    f"process {i}: spatial discretization has {self.spatial[i].n_nodes} "
                    f"nodes, expected {self.n_spatial}"
                )
            if self.temporal[i].n_steps != self.n_time:
                raise DimensionError(
                    f"process {i}: temporal discretization has {self.temporal[i].n_steps} "
                    f"steps, expected {self.n_time}"
                )
        if self.design:
            if len(self.design) != self.n_processes:
                raise DimensionError("one design matrix per process required")
            for i, a in enumerate(self.design):
                if a.shape[1] != self.latent_per_process:
                    raise DimensionError(
                        f"design matrix {i} has {a.shape[1]} columns, "
                        f"expected {self.latent_per_process}"
                    )
                if self.observations and a.shape[0] != len(self.observations[i]):
                    raise DimensionError(
                        f"process {i}: {len(self.observations[i])} observations do not "
                        f"match design matrix with {a.shape[0]} rows"
                    )
        if self.fixed_effect_precision <= 0:
            raise ValueError("fixed-effect prior precision must be positive")
        return self


def joint_dimension(spec):
    """Total latent dimension n_processes * (n_spatial * n_time + n_fixed)."""
    return spec.joint_dim


def spatio_temporal_precision(spatial, temporal, hypers):
    """Spatio-temporal precision block of one process (no fixed effects).

    With the spatial operator q1 = spatial_scale**2 * C + G (C the lumped
    mass, G the stiffness) and its mass-weighted powers q2 = q1 C^-1 q1,
    q3 = q1 C^-1 q2, the precision is

        variance_scale * (M0 x q3 + temporal_scale * M1 x q2
                          + temporal_scale**2 * M2 x q1)

    which is symmetric positive definite and block-tridiagonal in time.
    """
    hypers.validate()
    g_s = hypers.spatial_scale
    g_t = hypers.temporal_scale
    g_e = hypers.variance_scale

    mass_inv = sp.diags(1.0 / spatial.mass.diagonal())
    q1 = (g_s**2) * spatial.mass + spatial.stiffness
    q1 = ((q1 + q1.T) * 0.5).tocsr()
    q2 = q1 @ mass_inv @ q1
    q2 = ((q2 + q2.T) * 0.5).tocsr()
    q3 = q1 @ mass_inv @ q2
    q3 = ((q3 + q3.T) * 0.5).tocsr()

    out = g_e * (
        sp.kron(temporal.mass, q3, format="csr")
        + g_t * sp.kron(temporal.coupling, q2, format="csr")
        + g_t**2 * sp.kron(temporal.stiffness, q1, format="csr")
    )
    out.sum_duplicates()
    out.sort_indices()
    return out


def build_univariate_prior(spec, hypers, process_index):
    """Prior precision of one process: spatio-temporal block plus a diagonal
    fixed-effect block of precision ``spec.fixed_effect_precision``."""
    if process_index >= spec.n_processes:
        raise IndexError(f"process index {process_index} out of range")
    spatial = spec.spatial[process_index]
    temporal = spec.temporal[process_index]
    if spatial.n_nodes != spec.n_spatial:
        raise DimensionError("spatial discretization does not match n_spatial")
    if temporal.n_steps != spec.n_time:
        raise DimensionError("temporal discretization does not match n_time")
    st = spatio_temporal_precision(spatial, temporal, hypers)
    if spec.n_fixed == 0:
        return st
    tip = spec.fixed_effect_precision * sp.identity(spec.n_fixed, format="csr")
    out = sp.block_diag([st, tip], format="csr")
    out.sort_indices()
    return out


def build_conditional_precision(prior, design, noise):
    """Conditional precision prior + design^T diag(noise) design.

    ``noise`` is the diagonal of the negative log-likelihood Hessian, one
    entry per observation, all non-negative.
    """
    prior = sp.csr_matrix(prior)
    design = sp.csr_matrix(design)
    noise = np.asarray(noise, dtype=np.float64).ravel()
    if design.shape[1] != prior.shape[0]:
        raise DimensionError(
            f"design has {design.shape[1]} columns, expected {prior.shape[0]}"
        )
    if noise.shape[0] != design.shape[0]:
        raise DimensionError(
            f"noise diagonal has {noise.shape[0]} entries, expected {design.shape[0]}"
        )
    if np.any(noise < 0):
        raise ValueError("noise diagonal must be non-negative")
    update = design.T @ sp.diags(noise) @ design
    update = (update + update.T) * 0.5
    out = (prior + update).tocsr()
    out.sum_duplicates()
    out.sort_indices()
    return out


def path_graph_spatial(n_spatial, spacing=1.0):
    """Deterministic 1-D discretization: trapezoid lumped mass and the
    path-graph Laplacian stiffness, both scaled by the node spacing."""
    if n_spatial == 1:
        return SpatialDiscretization(
            mass=sp.csr_matrix(np.array([[spacing]])),
            stiffness=sp.csr_matrix((1, 1)),
        )
    weights = spacing * np.ones(n_spatial)
    weights[0] *= 0.5
    weights[-1] *= 0.5
    main = 2.0 * np.ones(n_spatial)
    main[0] = main[-1] = 1.0
    off = -np.ones(n_spatial - 1)
    lap = sp.diags([off, main, off], [-1, 0, 1], format="csr") / spacing
    return SpatialDiscretization(mass=sp.diags(weights, format="csr"), stiffness=lap)


def uniform_grid_temporal(n_time, step=1.0):
    """Deterministic uniform-grid temporal matrices with halved boundary rows.

    The first-order coupling matrix is the symmetrized boundary contribution
    of the first-derivative operator with positive (absolute-value) entries,
    which keeps every Kronecker term positive semi-definite.
    """
    if n_time == 1:
        one = sp.csr_matrix(np.array([[step]]))
        zero = sp.csr_matrix((1, 1))
        return TemporalDiscretization(mass=one, coupling=zero, stiffness=zero)
    weights = step * np.ones(n_time)
    weights[0] *= 0.5
    weights[-1] *= 0.5
    coupling = np.zeros(n_time)
    coupling[0] = coupling[-1] = 0.5
    main = 2.0 * np.ones(n_time)
    main[0] = main[-1] = 1.0
    off = -np.ones(n_time - 1)
    second = sp.diags([off, main, off], [-1, 0, 1], format="csr") / step
    return TemporalDiscretization(
        mass=sp.diags(weights, format="csr"),
        coupling=sp.diags(coupling, format="csr"),
        stiffness=second,
    )
