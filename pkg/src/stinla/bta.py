"""Sequential block-dense solver for SPD block-tridiagonal-arrowhead matrices.

A BTA matrix consists of ``n_blocks`` dense diagonal blocks of size
``block_size``, the sub-diagonal blocks coupling consecutive diagonal blocks,
a dense arrow block-row of height ``arrow_size`` spanning all block columns,
and a trailing ``arrow_size x arrow_size`` tip.  Only the lower triangle (at
block level) is stored; all block operations are delegated to dense BLAS/LAPACK
through numpy and scipy, so no operation ever forms the full dense matrix.
"""

import numpy as np
from scipy.io import mmwrite
from scipy.linalg import solve_triangular
from scipy.sparse import coo_matrix


class FactorizationError(RuntimeError):
    """A pivot block was not positive definite.

    This is an expected runtime signal (an infeasible hyperparameter proposal
    produces an indefinite conditional precision); callers typically treat the
    objective value as infinite rather than aborting.
    """

    def __init__(self, block_index, partition=None):
        self.block_index = block_index
        self.partition = partition
        where = f"block {block_index}"
        if partition is not None:
            where += f" (partition {partition})"
        super().__init__(f"non-positive-definite pivot at {where}")


class OpCounter:
    """Accumulates the modeled elimination cost of the structured solvers.

    Charges are cubic block units (``block_size**3`` per block elimination,
    ``arrow_size**3`` per arrow/tip step), i.e. the leading-order cost model of
    the factorization, not an exact flop tally.  Ratios of these counts are
    what the load-balance diagnostics assert against.
    """

    def __init__(self):
        self.flops = 0.0

    def charge(self, units):
        self.flops += float(units)


class BTAMatrix:
    """Block-dense storage of the lower triangle of a symmetric BTA matrix.

    All block values live in one contiguous ``data`` buffer, ordered as
    diagonal blocks, sub-diagonal blocks, arrow row blocks, tip.  The views
    ``diag``, ``lower``, ``arrow`` and ``tip`` alias that buffer, which lets a
    sparse-to-block scatter address any entry through a single flat offset.
    """

    def __init__(self, n_blocks, block_size, arrow_size=0, data=None):
        if n_blocks < 1 or block_size < 1 or arrow_size < 0:
            raise ValueError(
                f"invalid BTA shape (n_blocks={n_blocks}, block_size={block_size}, "
                f"arrow_size={arrow_size})"
            )
        self.n_blocks = n_blocks
        self.block_size = block_size
        self.arrow_size = arrow_size

        n, b, a = n_blocks, block_size, arrow_size
        sizes = (n * b * b, (n - 1) * b * b, n * a * b, a * a)
        total = sum(sizes)
        if data is None:
            data = np.zeros(total)
        else:
            data = np.asarray(data, dtype=np.float64)
            if data.shape != (total,):
                raise ValueError(f"data buffer must have {total} entries")
        self.data = data

        ends = np.cumsum(sizes)
        self.diag = data[: ends[0]].reshape(n, b, b)
        self.lower = data[ends[0] : ends[1]].reshape(n - 1, b, b)
        self.arrow = data[ends[1] : ends[2]].reshape(n, a, b)
        self.tip = data[ends[2] : ends[3]].reshape(a, a)
        # flat-offset bases used by the sparse scatter, and the identity of
        # the last pattern scattered into this storage
        self._base_lower = ends[0]
        self._base_arrow = ends[1]
        self._base_tip = ends[2]
        self._scatter_source = None

    @property
    def dim(self):
        """Total matrix dimension n_blocks * block_size + arrow_size."""
        return self.n_blocks * self.block_size + self.arrow_size

    def copy(self):
        return BTAMatrix(
            self.n_blocks, self.block_size, self.arrow_size, self.data.copy()
        )

    def zero(self):
        self.data[:] = 0.0
        self._scatter_source = None
        return self

    def to_dense(self):
        """Densify (for oracles and debugging only; O(dim**2) memory)."""
        n, b, a = self.n_blocks, self.block_size, self.arrow_size
        full = np.zeros((self.dim, self.dim))
        for i in range(n):
            full[i * b : (i + 1) * b, i * b : (i + 1) * b] = self.diag[i]
        for i in range(n - 1):
            full[(i + 1) * b : (i + 2) * b, i * b : (i + 1) * b] = self.lower[i]
            full[i * b : (i + 1) * b, (i + 1) * b : (i + 2) * b] = self.lower[i].T
        if a > 0:
            for i in range(n):
                full[n * b :, i * b : (i + 1) * b] = self.arrow[i]
                full[i * b : (i + 1) * b, n * b :] = self.arrow[i].T
            full[n * b :, n * b :] = self.tip
        return full

    @classmethod
    def from_dense(cls, dense, n_blocks, block_size, arrow_size=0):
        """Extract the BTA pattern entries of a dense symmetric matrix."""
        dense = np.asarray(dense, dtype=np.float64)
        out = cls(n_blocks, block_size, arrow_size)
        n, b, a = n_blocks, block_size, arrow_size
        if dense.shape != (out.dim, out.dim):
            raise ValueError("dense matrix does not match the BTA envelope")
        for i in range(n):
            out.diag[i] = dense[i * b : (i + 1) * b, i * b : (i + 1) * b]
        for i in range(n - 1):
            out.lower[i] = dense[(i + 1) * b : (i + 2) * b, i * b : (i + 1) * b]
        if a > 0:
            for i in range(n):
                out.arrow[i] = dense[n * b :, i * b : (i + 1) * b]
            out.tip[...] = dense[n * b :, n * b :]
        return out

    def matvec(self, x):
        """Symmetric matrix-vector product from the lower-triangle storage."""
        x = np.asarray(x, dtype=np.float64)
        n, b, a = self.n_blocks, self.block_size, self.arrow_size
        squeeze = x.ndim == 1
        X = x.reshape(self.dim, -1)
        out = np.zeros_like(X)
        for i in range(n):
            seg = self.diag[i] @ X[i * b : (i + 1) * b]
            if i > 0:
                seg += self.lower[i - 1] @ X[(i - 1) * b : i * b]
            if i < n - 1:
                seg += self.lower[i].T @ X[(i + 1) * b : (i + 2) * b]
            if a > 0:
                seg += self.arrow[i].T @ X[n * b :]
            out[i * b : (i + 1) * b] = seg
        if a > 0:
            tip_seg = self.tip @ X[n * b :]
            for i in range(n):
                tip_seg += self.arrow[i] @ X[i * b : (i + 1) * b]
            out[n * b :] = tip_seg
        return out[:, 0] if squeeze else out


class BTAFactor:
    """Cholesky factor of a BTA matrix, stored in the matrix's own blocks."""

    def __init__(self, matrix, has_arrow):
        self.matrix = matrix
        self.has_arrow = has_arrow

    @property
    def dim(self):
        return self.matrix.dim


def factorize(matrix, counter=None):
    """Block Cholesky factorization, in place, respecting the BTA pattern.

    Parameters
    ----------
    matrix : BTAMatrix
        Symmetric positive definite input; overwritten with the factor blocks.
    counter : OpCounter, optional
        Receives modeled elimination charges.

    Returns
    -------
    BTAFactor

    Raises
    ------
    FactorizationError
        If a pivot block is not positive definite; carries the block index.
    """
    n, b, a = matrix.n_blocks, matrix.block_size, matrix.arrow_size
    diag, lower, arrow, tip = matrix.diag, matrix.lower, matrix.arrow, matrix.tip
    # in-place factorization writes fill outside any bound scatter pattern
    matrix._scatter_source = None
    # A prior precision carries a decoupled tip and all-zero arrow rows; skip
    # the arrow updates entirely so it factorizes at block-tridiagonal cost.
    use_arrow = a > 0 and bool(np.any(arrow))

    for i in range(n):
        try:
            diag[i] = np.linalg.cholesky(diag[i])
        except np.linalg.LinAlgError:
            raise FactorizationError(i) from None
        if counter is not None:
            counter.charge(b**3)
        pivot = diag[i]
        if i < n - 1:
            lower[i] = solve_triangular(
                pivot, lower[i].T, lower=True, check_finite=False
            ).T
        if use_arrow:
            arrow[i] = solve_triangular(
                pivot, arrow[i].T, lower=True, check_finite=False
            ).T
            if counter is not None:
                counter.charge(a**3)
        if i < n - 1:
            diag[i + 1] -= lower[i] @ lower[i].T
            if use_arrow:
                arrow[i + 1] -= arrow[i] @ lower[i].T
        if use_arrow:
            tip -= arrow[i] @ arrow[i].T
    if a > 0:
        try:
            tip[...] = np.linalg.cholesky(tip)
        except np.linalg.LinAlgError:
            raise FactorizationError(n) from None
        if counter is not None:
            counter.charge(a**3)
    return BTAFactor(matrix, use_arrow)


def logdet(factor):
    """log-determinant of the factored matrix, 2 * sum(log diag(L))."""
    m = factor.matrix
    total = 0.0
    for i in range(m.n_blocks):
        total += np.sum(np.log(np.diagonal(m.diag[i])))
    if m.arrow_size > 0:
        total += np.sum(np.log(np.diagonal(m.tip)))
    return 2.0 * total


def forward_substitute(factor, rhs, counter=None):
    """Solve L y = rhs against the BTA Cholesky factor."""
    m = factor.matrix
    n, b, a = m.n_blocks, m.block_size, m.arrow_size
    x = np.array(rhs, dtype=np.float64, copy=True)
    if x.shape[0] != m.dim:
        raise ValueError(f"rhs has length {x.shape[0]}, expected {m.dim}")
    squeeze = x.ndim == 1
    X = x.reshape(m.dim, -1)
    for i in range(n):
        seg = X[i * b : (i + 1) * b]
        if i > 0:
            seg -= m.lower[i - 1] @ X[(i - 1) * b : i * b]
        X[i * b : (i + 1) * b] = solve_triangular(
            m.diag[i], seg, lower=True, check_finite=False
        )
        if counter is not None:
            counter.charge(b**2)
    if a > 0:
        seg = X[n * b :]
        if factor.has_arrow:
            for i in range(n):
                seg -= m.arrow[i] @ X[i * b : (i + 1) * b]
        X[n * b :] = solve_triangular(m.tip, seg, lower=True, check_finite=False)
        if counter is not None:
            counter.charge(a**2)
    return x if squeeze else X


def backward_substitute(factor, rhs, counter=None):
    """Solve L^T x = rhs against the BTA Cholesky factor."""
    m = factor.matrix
    n, b, a = m.n_blocks, m.block_size, m.arrow_size
    x = np.array(rhs, dtype=np.float64, copy=True)
    if x.shape[0] != m.dim:
        raise ValueError(f"rhs has length {x.shape[0]}, expected {m.dim}")
    squeeze = x.ndim == 1
    X = x.reshape(m.dim, -1)
    if a > 0:
        X[n * b :] = solve_triangular(
            m.tip, X[n * b :], lower=True, trans="T", check_finite=False
        )
    for i in range(n - 1, -1, -1):
        seg = X[i * b : (i + 1) * b]
        if i < n - 1:
            seg -= m.lower[i].T @ X[(i + 1) * b : (i + 2) * b]
        if a > 0 and factor.has_arrow:
            seg -= m.arrow[i].T @ X[n * b :]
        X[i * b : (i + 1) * b] = solve_triangular(
            m.diag[i], seg, lower=True, trans="T", check_finite=False
        )
        if counter is not None:
            counter.charge(b**2)
    return x if squeeze else X


def solve(factor, rhs, counter=None):
    """Solve M x = rhs through forward then backward block substitution."""
    return backward_substitute(factor, forward_substitute(factor, rhs, counter), counter)


def selected_invert(factor, counter=None):
    """Entries of the inverse on the BTA pattern, via the factor recursion.

    Works backwards over block columns, keeping only pattern-sized blocks in
    memory; no dense transient of the full inverse is ever formed.

    Returns
    -------
    BTAMatrix
        Holding the pattern entries of ``M**-1``.
    """
    m = factor.matrix
    n, b, a = m.n_blocks, m.block_size, m.arrow_size
    inv = BTAMatrix(n, b, a)
    eye_b = np.eye(b)
    use_arrow = factor.has_arrow
    if a > 0:
        tip_inv = solve_triangular(m.tip, np.eye(a), lower=True, check_finite=False)
        inv.tip[...] = tip_inv.T @ tip_inv
    for i in range(n - 1, -1, -1):
        pivot_inv = solve_triangular(m.diag[i], eye_b, lower=True, check_finite=False)
        sub = m.lower[i] if i < n - 1 else None
        arr = m.arrow[i] if use_arrow else None

        x_next = None
        if sub is not None:
            acc = inv.diag[i + 1] @ sub
            if use_arrow:
                acc += inv.arrow[i + 1].T @ arr
            x_next = -(acc @ pivot_inv)
            inv.lower[i] = x_next
        x_arr = None
        if use_arrow:
            acc = inv.tip @ arr
            if sub is not None:
                acc += inv.arrow[i + 1] @ sub
            x_arr = -(acc @ pivot_inv)
            inv.arrow[i] = x_arr

        acc = pivot_inv.T
        if x_next is not None:
            acc = acc - x_next.T @ sub
        if x_arr is not None:
            acc = acc - x_arr.T @ arr
        inv.diag[i] = acc @ pivot_inv
        if counter is not None:
            counter.charge(b**3)
            if use_arrow:
                counter.charge(a**3)
    return inv


def random_spd_bta(rng, n_blocks, block_size, arrow_size=0):
    """Well-conditioned random SPD BTA matrix (for verification/benchmarks).

    Built as L L^T from a random lower-BTA factor with positive diagonal, so
    the result is SPD and exactly BTA-structured.
    """
    n, b, a = n_blocks, block_size, arrow_size
    scale = 0.3 / np.sqrt(b)
    ldiag = rng.normal(scale=scale, size=(n, b, b))
    for i in range(n):
        ldiag[i] = np.tril(ldiag[i], -1) + np.diag(1.0 + rng.uniform(0.0, 1.0, size=b))
    lsub = rng.normal(scale=scale, size=(n - 1, b, b)) if n > 1 else np.zeros((0, b, b))
    larr = rng.normal(scale=scale, size=(n, a, b))
    ltip = rng.normal(scale=scale, size=(a, a))
    ltip = np.tril(ltip, -1) + np.diag(1.0 + rng.uniform(0.0, 1.0, size=a))

    out = BTAMatrix(n, b, a)
    for i in range(n):
        out.diag[i] = ldiag[i] @ ldiag[i].T
        if i > 0:
            out.diag[i] += lsub[i - 1] @ lsub[i - 1].T
    for i in range(n - 1):
        out.lower[i] = lsub[i] @ ldiag[i].T
    if a > 0:
        for i in range(n):
            out.arrow[i] = larr[i] @ ldiag[i].T
            if i > 0:
                out.arrow[i] += larr[i - 1] @ lsub[i - 1].T
        tip = ltip @ ltip.T
        for i in range(n):
            tip += larr[i] @ larr[i].T
        out.tip[...] = tip
    return out


def dump_matrix_market(matrix, path, comment=""):
    """Write the pattern entries of a BTAMatrix to a Matrix Market file.

    The lower triangle is written with symmetric storage so external tools can
    cross-check the block-dense workspace entry by entry.
    """
    n, b, a = matrix.n_blocks, matrix.block_size, matrix.arrow_size
    rows, cols, vals = [], [], []

    def emit(block, r0, c0, lower_only=False):
        br, bc = block.shape
        for r in range(br):
            stop = min(r + 1, bc) if lower_only else bc
            for c in range(stop):
                rows.append(r0 + r)
                cols.append(c0 + c)
                vals.append(block[r, c])

    for i in range(n):
        emit(matrix.diag[i], i * b, i * b, lower_only=True)
    for i in range(n - 1):
        emit(matrix.lower[i], (i + 1) * b, i * b)
    if a > 0:
        for i in range(n):
            emit(matrix.arrow[i], n * b, i * b)
        emit(matrix.tip, n * b, n * b, lower_only=True)
    coo = coo_matrix(
        (np.array(vals), (np.array(rows, dtype=int), np.array(cols, dtype=int))),
        shape=(matrix.dim, matrix.dim),
    )
    mmwrite(str(path), coo, comment=comment, symmetry="symmetric")
