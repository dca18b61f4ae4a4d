"""Joint multivariate precision assembly, time-major permutation, and the
O(nnz) scatter of sparse values into the block-dense BTA workspace."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .model import DimensionError


class EnvelopeError(ValueError):
    """A structural nonzero falls outside the BTA envelope, which signals a
    permutation or model-construction bug."""


def coupling_positions(n_processes):
    """Strictly-lower positions of the coregionalization couplings.

    Couplings are assigned per mixing row, nearest predecessor first, which
    reproduces the trivariate closed form: the first coupling ties process 2
    to process 1, the second ties 3 to 2, the third ties 3 to 1.
    """
    out = []
    for i in range(1, n_processes):
        for j in range(i - 1, -1, -1):
            out.append((i, j))
    return out


@dataclass
class Coregionalization:
    """Scales and couplings of the linear mixing of unit-variance processes.

    The mixing matrix is defined row-recursively: row i of the mixing equals
    its own scale times the unit vector plus coupling-weighted copies of the
    preceding rows.  Scales must be positive; couplings are unconstrained.
    """

    scales: np.ndarray
    couplings: np.ndarray

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float64).ravel()
        self.couplings = np.asarray(self.couplings, dtype=np.float64).ravel()
        n = self.scales.size
        expected = n * (n - 1) // 2
        if self.couplings.size != expected:
            raise DimensionError(
                f"{n} processes require {expected} couplings, got {self.couplings.size}"
            )
        if np.any(self.scales <= 0):
            raise ValueError("coregionalization scales must be strictly positive")

    @property
    def n_processes(self):
        return self.scales.size

    def _coupling_matrix(self):
        n = self.n_processes
        t = np.zeros((n, n))
        for lam, (i, j) in zip(self.couplings, coupling_positions(n)):
            t[i, j] = lam
        return t

    def mixing(self):
        """Dense n x n mixing coefficients (lower triangular, invertible)."""
        n = self.n_processes
        body = np.linalg.solve(np.eye(n) - self._coupling_matrix(), np.eye(n))
        return body @ np.diag(self.scales)

    def mixing_inverse(self):
        """Inverse mixing coefficients, formed by scaled forward substitution
        (closed form for a unit lower-triangular recursion; no dense latent
        inverse is involved)."""
        n = self.n_processes
        return np.diag(1.0 / self.scales) @ (np.eye(n) - self._coupling_matrix())


def assemble_joint_precision(precisions, coreg):
    """Joint precision of the mixed multivariate process.

    Congruence of the block-diagonal univariate precisions with the inverse
    mixing, carried out block by block with scalar coefficients; the i,j block
    is sum_k Linv[k,i] Linv[k,j] Q_k.  Every structural term is kept even when
    its coefficient vanishes, so the output pattern is independent of the
    parameter values.
    """
    n_v = len(precisions)
    if coreg.n_processes != n_v:
        raise DimensionError(
            f"coregionalization has {coreg.n_processes} processes, got {n_v} precisions"
        )
    dim = precisions[0].shape[0]
    for q in precisions:
        if q.shape != (dim, dim):
            raise DimensionError("all univariate precisions must share their dimension")
    linv = coreg.mixing_inverse()

    # accumulate raw triplets: sparse binary operators prune exact zeros,
    # which would make the output pattern depend on the parameter values
    coos = [sp.coo_matrix(q) for q in precisions]
    rows, cols, data = [], [], []
    for i in range(n_v):
        for j in range(i + 1):
            for k in range(i, n_v):
                coeff = linv[k, i] * linv[k, j]
                rows.append(coos[k].row + i * dim)
                cols.append(coos[k].col + j * dim)
                data.append(coeff * coos[k].data)
                if i != j:
                    rows.append(coos[k].row + j * dim)
                    cols.append(coos[k].col + i * dim)
                    data.append(coeff * coos[k].data)
    out = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_v * dim, n_v * dim),
    ).tocsr()
    out.sum_duplicates()
    out.sort_indices()
    return out


@dataclass
class _BoundScatter:
    """Per-nonzero flat offsets of a bound sparse pattern into BTA storage."""

    kept: np.ndarray
    offsets: np.ndarray
    nnz: int


class PermutationMap:
    """Variable-major to time-major (BTA) reordering of the joint latent.

    ``forward[old] = new`` maps the assembly order (process, time, space,
    then per-process fixed effects) onto the solver order (time blocks of all
    processes, fixed effects of all processes gathered at the tail).  Binding
    the map to a sparse pattern precomputes one flat storage offset per
    structural nonzero so repeated value updates are a pure O(nnz) scatter.
    """

    def __init__(self, n_processes, n_spatial, n_time, n_fixed):
        self.n_processes = n_processes
        self.n_spatial = n_spatial
        self.n_time = n_time
        self.n_fixed = n_fixed
        self.n_blocks = n_time
        self.block_size = n_processes * n_spatial
        self.arrow_size = n_processes * n_fixed
        self.dim = self.n_blocks * self.block_size + self.arrow_size

        per = n_spatial * n_time + n_fixed
        forward = np.empty(n_processes * per, dtype=np.int64)
        for v in range(n_processes):
            st = np.arange(n_spatial * n_time)
            times, spaces = np.divmod(st, n_spatial)
            forward[v * per + st] = times * self.block_size + v * n_spatial + spaces
            if n_fixed:
                effects = np.arange(n_fixed)
                forward[v * per + n_spatial * n_time + effects] = (
                    n_processes * n_spatial * n_time + v * n_fixed + effects
                )
        self.forward = forward
        self.backward = np.argsort(forward)
        self._bound = None

    def permute_vector(self, x):
        """Reorder a variable-major vector into BTA (time-major) order."""
        x = np.asarray(x)
        out = np.empty_like(x)
        out[self.forward] = x
        return out

    def restore_vector(self, x):
        """Inverse of :meth:`permute_vector`."""
        return np.asarray(x)[self.forward]

    def permuted_matrix(self, matrix):
        """Explicitly permuted sparse matrix (oracle/debug path; the solver
        path scatters values directly instead)."""
        matrix = sp.csr_matrix(matrix)
        order = self.backward
        return matrix[order][:, order].tocsr()

    def bind(self, pattern):
        """Precompute the scatter for one canonical CSR pattern.

        Entries that land in a strictly-upper block are dropped (their lower
        mirrors carry the same value for a symmetric matrix), so every kept
        nonzero owns a distinct storage slot.
        """
        pattern = sp.csr_matrix(pattern)
        if pattern.shape != (self.dim, self.dim):
            raise DimensionError(
                f"pattern is {pattern.shape}, expected ({self.dim}, {self.dim})"
            )
        n, b, a = self.n_blocks, self.block_size, self.arrow_size
        rows = np.repeat(np.arange(self.dim), np.diff(pattern.indptr))
        cols = pattern.indices
        pr = self.forward[rows]
        pc = self.forward[cols]

        split = n * b
        in_st_r = pr < split
        in_st_c = pc < split
        ti = pr // b
        tj = pc // b

        both_st = in_st_r & in_st_c
        bad = both_st & (np.abs(ti - tj) >= 2)
        if np.any(bad):
            k = int(np.flatnonzero(bad)[0])
            raise EnvelopeError(
                f"nonzero at ({rows[k]}, {cols[k]}) maps to time blocks "
                f"({ti[k]}, {tj[k]}), outside the block-tridiagonal envelope"
            )

        offsets = np.full(rows.shape[0], -1, dtype=np.int64)
        base_lower = n * b * b
        base_arrow = base_lower + (n - 1) * b * b
        base_tip = base_arrow + n * a * b

        on_diag = both_st & (ti == tj)
        offsets[on_diag] = ti[on_diag] * b * b + (pr[on_diag] % b) * b + (pc[on_diag] % b)
        on_lower = both_st & (ti == tj + 1)
        offsets[on_lower] = (
            base_lower + tj[on_lower] * b * b + (pr[on_lower] % b) * b + (pc[on_lower] % b)
        )
        on_arrow = (~in_st_r) & in_st_c
        offsets[on_arrow] = (
            base_arrow
            + tj[on_arrow] * a * b
            + (pr[on_arrow] - split) * b
            + (pc[on_arrow] % b)
        )
        on_tip = (~in_st_r) & (~in_st_c)
        offsets[on_tip] = base_tip + (pr[on_tip] - split) * a + (pc[on_tip] - split)

        kept = np.flatnonzero(offsets >= 0)
        return _BoundScatter(kept=kept, offsets=offsets[kept], nnz=pattern.nnz)


def build_permutation(spec):
    """PermutationMap for a model; the BTA envelope is (n_time blocks of size
    n_processes * n_spatial, arrow tip of size n_processes * n_fixed)."""
    return PermutationMap(spec.n_processes, spec.n_spatial, spec.n_time, spec.n_fixed)


def map_to_bta(matrix, pmap, workspace, bound=None):
    """Scatter the values of an assembled symmetric sparse matrix into a BTA
    workspace, using (and caching) the permutation's bound offsets.

    Positions of the workspace not covered by the pattern are zero.  The
    first scatter into a workspace clears it; rescattering the same pattern
    into the same workspace skips the clear, so the repeated-update cost is
    proportional to the stored nonzeros rather than the block storage.
    """
    matrix = sp.csr_matrix(matrix)
    if (
        workspace.n_blocks != pmap.n_blocks
        or workspace.block_size != pmap.block_size
        or workspace.arrow_size != pmap.arrow_size
    ):
        raise DimensionError("workspace envelope does not match the permutation map")
    if bound is None:
        if pmap._bound is None or pmap._bound.nnz != matrix.nnz:
            pmap._bound = pmap.bind(matrix)
        bound = pmap._bound
    elif bound.nnz != matrix.nnz:
        raise DimensionError("bound scatter was built for a different pattern")
    if getattr(workspace, "_scatter_source", None) is not bound:
        workspace.data[:] = 0.0
        workspace._scatter_source = bound
    workspace.data[bound.offsets] = matrix.data[bound.kept]
    return workspace
