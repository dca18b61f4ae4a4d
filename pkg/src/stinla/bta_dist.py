"""Partitioned BTA factorization, triangular solve and selected inversion.

The time-block chain is cut into ``P`` contiguous partitions.  Each partition
eliminates its interior blocks independently; its first/last blocks act as
separators that accumulate Schur-complement contributions.  The separators
plus the arrow tip form a reduced BTA system of ``2 (P - 1)`` blocks which is
factorized once on a single worker; interior results are then recovered
partition by partition.  All routines agree with the sequential module, and a
single-partition plan delegates to it outright, bit for bit.

Interior partitions carry an extra coupling buffer towards their left
separator during elimination, which is the structural source of their added
workload relative to the boundary partitions.
"""

import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import bta
from .bta import BTAFactor, BTAMatrix, FactorizationError


@contextmanager
def _phase(phase_times, name):
    """Accumulate wall time of one phase into an optional dict."""
    if phase_times is None:
        yield
        return
    tic = time.perf_counter()
    try:
        yield
    finally:
        phase_times[name] = phase_times.get(name, 0.0) + time.perf_counter() - tic


class PlanError(ValueError):
    """The requested (n, P) partitioning is infeasible."""


@dataclass(frozen=True)
class PartitionPlan:
    """Deterministic slicing of the time-block chain into partitions."""

    n_blocks: int
    boundaries: tuple
    lb: float

    @property
    def n_partitions(self):
        return len(self.boundaries) - 1

    @property
    def sizes(self):
        return tuple(
            self.boundaries[p + 1] - self.boundaries[p]
            for p in range(self.n_partitions)
        )


def plan_partitions(n_blocks, n_partitions, lb=1.0):
    """Partition ``n_blocks`` time blocks into ``n_partitions`` slices.

    With ``lb == 1`` the split is near-even with the remainder spread from the
    front.  With ``lb > 1`` the first (boundary) partition receives roughly
    ``lb`` times the interior partition size: its size is
    ``floor(lb * n / (P - 1 + lb))``, clamped so every partition keeps at
    least two blocks, and the rest is split evenly with the remainder spread
    from the front.
    """
    if n_partitions < 1:
        raise PlanError("at least one partition required")
    if lb < 1.0:
        raise PlanError("load-balance factor must be >= 1")
    if n_partitions == 1:
        if n_blocks < 1:
            raise PlanError("empty matrix")
        return PartitionPlan(n_blocks, (0, n_blocks), lb)
    if n_blocks < 2 * n_partitions:
        raise PlanError(
            f"{n_partitions} partitions require at least {2 * n_partitions} "
            f"time blocks, got {n_blocks}"
        )
    if lb == 1.0:
        q, r = divmod(n_blocks, n_partitions)
        sizes = [q + 1] * r + [q] * (n_partitions - r)
    else:
        first = int(np.floor(lb * n_blocks / (n_partitions - 1 + lb)))
        first = max(2, min(first, n_blocks - 2 * (n_partitions - 1)))
        rest = n_blocks - first
        q, r = divmod(rest, n_partitions - 1)
        sizes = [first] + [q + 1] * r + [q] * (n_partitions - 1 - r)
    boundaries = tuple(np.concatenate([[0], np.cumsum(sizes)]).tolist())
    return PartitionPlan(n_blocks, boundaries, lb)


def plan_partitions_with_fallback(n_blocks, n_partitions, lb=1.0):
    """Like :func:`plan_partitions` but reduces the partition count (with a
    warning) when the requested plan would leave a partition under two
    blocks."""
    feasible = max(1, min(n_partitions, n_blocks // 2))
    if feasible != n_partitions:
        warnings.warn(
            f"reducing partitions from {n_partitions} to {feasible} "
            f"({n_blocks} time blocks)",
            stacklevel=2,
        )
    return plan_partitions(n_blocks, feasible, lb)


@dataclass
class _PartitionFactor:
    """Factor pieces of one partition's interior elimination."""

    index: int
    lo: int
    hi: int
    left: int
    right: int
    diag_factors: np.ndarray
    sub_factors: np.ndarray
    left_factors: np.ndarray
    right_factor: np.ndarray
    arrow_factors: np.ndarray
    logdet: float
    # Schur contributions onto the reduced system
    d_left: np.ndarray
    d_right: np.ndarray
    fill: np.ndarray
    f_left: np.ndarray
    f_right: np.ndarray
    d_tip: np.ndarray

    @property
    def interior_count(self):
        return self.hi - self.lo


class DistBTAFactor:
    """Combined partition factors plus the factorized reduced system."""

    def __init__(
        self, plan, matrix_shape, partitions, reduced_factor, separators, use_arrow=False
    ):
        self.plan = plan
        self.n_blocks, self.block_size, self.arrow_size = matrix_shape
        self.partitions = partitions
        self.reduced_factor = reduced_factor
        self.separators = separators
        self.sep_pos = {t: k for k, t in enumerate(separators)}
        self._use_arrow = use_arrow
        self.sequential = None  # set for single-partition delegation

    @property
    def dim(self):
        return self.n_blocks * self.block_size + self.arrow_size

    @property
    def has_arrow(self):
        if self.sequential is not None:
            return self.sequential.has_arrow
        return self._use_arrow


def _tsolve(pivot, block):
    """block @ pivot^{-T} for a lower-triangular pivot."""
    return solve_triangular(pivot, block.T, lower=True, check_finite=False).T


def _eliminate_partition(matrix, index, lo, hi, left, right, use_arrow, counter=None):
    """Eliminate the interior blocks [lo, hi) of one partition.

    ``left``/``right`` are the separator time-block indices bounding the
    interior (None at the chain ends).  Returns the partition factor with the
    Schur contributions its separators and the tip receive.
    """
    b = matrix.block_size
    a = matrix.arrow_size
    k = hi - lo
    has_left = left is not None
    has_right = right is not None

    pf = _PartitionFactor(
        index=index,
        lo=lo,
        hi=hi,
        left=left,
        right=right,
        diag_factors=np.zeros((k, b, b)),
        sub_factors=np.zeros((max(k - 1, 0), b, b)),
        left_factors=np.zeros((k, b, b)) if has_left else None,
        right_factor=None,
        arrow_factors=np.zeros((k, a, b)) if use_arrow else None,
        logdet=0.0,
        d_left=np.zeros((b, b)) if has_left else None,
        d_right=None,
        fill=None,
        f_left=np.zeros((a, b)) if (has_left and use_arrow) else None,
        f_right=None,
        d_tip=np.zeros((a, a)) if use_arrow else None,
    )
    if k == 0:
        return pf

    dcur = matrix.diag[lo].copy()
    bcur = matrix.lower[lo - 1].T.copy() if has_left else None
    fcur = matrix.arrow[lo].copy() if use_arrow else None

    for j in range(lo, hi):
        try:
            pivot = np.linalg.cholesky(dcur)
        except np.linalg.LinAlgError:
            raise FactorizationError(j, partition=index) from None
        pf.diag_factors[j - lo] = pivot
        pf.logdet += 2.0 * np.sum(np.log(np.diagonal(pivot)))
        if counter is not None:
            counter.charge(b**3)
            if has_left:
                counter.charge(b**3)
            if use_arrow:
                counter.charge(a**3)

        g_left = _tsolve(pivot, bcur) if has_left else None
        g_arrow = _tsolve(pivot, fcur) if use_arrow else None
        if has_left:
            pf.left_factors[j - lo] = g_left
            pf.d_left -= g_left @ g_left.T
            if use_arrow:
                pf.f_left -= g_arrow @ g_left.T
        if use_arrow:
            pf.arrow_factors[j - lo] = g_arrow
            pf.d_tip -= g_arrow @ g_arrow.T

        if j + 1 < hi:
            g_next = _tsolve(pivot, matrix.lower[j])
            pf.sub_factors[j - lo] = g_next
            dcur = matrix.diag[j + 1] - g_next @ g_next.T
            if has_left:
                bcur = -(g_left @ g_next.T)
            if use_arrow:
                fcur = matrix.arrow[j + 1] - g_arrow @ g_next.T
        elif has_right:
            g_right = _tsolve(pivot, matrix.lower[hi - 1])
            pf.right_factor = g_right
            pf.d_right = -(g_right @ g_right.T)
            if has_left:
                pf.fill = -(g_right @ g_left.T)
            if use_arrow:
                pf.f_right = -(g_arrow @ g_right.T)
    return pf


def _separators(plan):
    seps = []
    p_count = plan.n_partitions
    for p in range(p_count):
        if p > 0:
            seps.append(plan.boundaries[p])
        if p < p_count - 1:
            seps.append(plan.boundaries[p + 1] - 1)
    return seps


def _partition_ranges(plan):
    """(lo, hi, left, right) of each partition's interior."""
    out = []
    p_count = plan.n_partitions
    for p in range(p_count):
        start, end = plan.boundaries[p], plan.boundaries[p + 1]
        lo = start + 1 if p > 0 else start
        hi = end - 1 if p < p_count - 1 else end
        left = start if p > 0 else None
        right = end - 1 if p < p_count - 1 else None
        out.append((lo, hi, left, right))
    return out


def d_factorize(matrix, plan, counter=None, mapper=None, phase_times=None):
    """Partitioned block Cholesky factorization.

    Parameters
    ----------
    matrix : BTAMatrix
        SPD input.  With a single-partition plan it is factorized in place by
        the sequential routine; otherwise it is only read.
    plan : PartitionPlan
    counter : OpCounter, optional
    mapper : callable, optional
        ``mapper(fn, items) -> list`` used to run the per-partition
        eliminations; defaults to a serial loop.  Results are combined in
        partition-index order regardless of the mapper, so outputs do not
        depend on how the work is spread over workers.
    """
    if plan.n_blocks != matrix.n_blocks:
        raise PlanError("plan does not match the matrix block count")
    if plan.n_partitions == 1:
        with _phase(phase_times, "total"):
            factor = bta.factorize(matrix, counter=counter)
        dist = DistBTAFactor(plan, (matrix.n_blocks, matrix.block_size, matrix.arrow_size), [], None, [])
        dist.sequential = factor
        return dist

    b, a = matrix.block_size, matrix.arrow_size
    use_arrow = a > 0 and bool(np.any(matrix.arrow))
    ranges = _partition_ranges(plan)

    def job(args):
        p, (lo, hi, left, right) = args
        return _eliminate_partition(matrix, p, lo, hi, left, right, use_arrow, counter)

    items = list(enumerate(ranges))
    with _phase(phase_times, "eliminate"):
        if mapper is None:
            partitions = [job(it) for it in items]
        else:
            partitions = list(mapper(job, items))

    seps = _separators(plan)
    n_red = len(seps)
    reduced = BTAMatrix(n_red, b, a)
    for k, t in enumerate(seps):
        reduced.diag[k] = matrix.diag[t]
        if use_arrow:
            reduced.arrow[k] = matrix.arrow[t]
    for k in range(n_red - 1):
        if seps[k + 1] == seps[k] + 1:
            reduced.lower[k] = matrix.lower[seps[k]]
    if a > 0:
        reduced.tip[...] = matrix.tip

    sep_pos = {t: k for k, t in enumerate(seps)}
    for pf in partitions:
        if pf.left is not None:
            pos = sep_pos[pf.left]
            reduced.diag[pos] += pf.d_left
            if use_arrow:
                reduced.arrow[pos] += pf.f_left
        if pf.d_right is not None:
            pos = sep_pos[pf.right]
            reduced.diag[pos] += pf.d_right
            if use_arrow:
                reduced.arrow[pos] += pf.f_right
            if pf.fill is not None:
                reduced.lower[sep_pos[pf.left]] += pf.fill
        if use_arrow and pf.d_tip is not None:
            reduced.tip += pf.d_tip

    try:
        with _phase(phase_times, "reduced"):
            reduced_factor = bta.factorize(reduced, counter=counter)
    except FactorizationError as err:
        raise FactorizationError(seps[min(err.block_index, n_red - 1)], partition=-1) from None
    return DistBTAFactor(
        plan, (matrix.n_blocks, b, a), partitions, reduced_factor, seps, use_arrow
    )


def d_logdet(factor):
    """log-determinant: interior contributions plus the reduced system's."""
    if factor.sequential is not None:
        return bta.logdet(factor.sequential)
    total = sum(pf.logdet for pf in factor.partitions)
    return total + bta.logdet(factor.reduced_factor)


def d_solve(factor, rhs, counter=None, phase_times=None):
    """Distributed triangular solve.

    Per-partition forward elimination folds the interior unknowns onto the
    separators and the tip, the reduced system is solved once, and each
    partition back-substitutes its interior independently.
    """
    if factor.sequential is not None:
        with _phase(phase_times, "total"):
            return bta.solve(factor.sequential, rhs, counter=counter)
    b, a = factor.block_size, factor.arrow_size
    n = factor.n_blocks
    x = np.array(rhs, dtype=np.float64, copy=True)
    if x.shape[0] != factor.dim:
        raise ValueError(f"rhs has length {x.shape[0]}, expected {factor.dim}")
    squeeze = x.ndim == 1
    X = x.reshape(factor.dim, -1)
    ncol = X.shape[1]
    use_arrow = factor.has_arrow

    seps = factor.separators
    n_red = len(seps)
    red_rhs = np.zeros((n_red * b + a, ncol))
    for k, t in enumerate(seps):
        red_rhs[k * b : (k + 1) * b] = X[t * b : (t + 1) * b]
    if a > 0:
        red_rhs[n_red * b :] = X[n * b :]

    ys = []
    with _phase(phase_times, "forward"):
        for pf in factor.partitions:
            y = np.zeros((pf.interior_count * b, ncol))
            for j in range(pf.lo, pf.hi):
                r = j - pf.lo
                seg = X[j * b : (j + 1) * b].copy()
                if r > 0:
                    seg -= pf.sub_factors[r - 1] @ y[(r - 1) * b : r * b]
                y[r * b : (r + 1) * b] = solve_triangular(
                    pf.diag_factors[r], seg, lower=True, check_finite=False
                )
                if counter is not None:
                    counter.charge(b**2)
                if pf.left is not None:
                    pos = factor.sep_pos[pf.left]
                    red_rhs[pos * b : (pos + 1) * b] -= (
                        pf.left_factors[r] @ y[r * b : (r + 1) * b]
                    )
                if j == pf.hi - 1 and pf.right is not None:
                    pos = factor.sep_pos[pf.right]
                    red_rhs[pos * b : (pos + 1) * b] -= (
                        pf.right_factor @ y[r * b : (r + 1) * b]
                    )
                if use_arrow:
                    red_rhs[n_red * b :] -= pf.arrow_factors[r] @ y[r * b : (r + 1) * b]
            ys.append(y)

    with _phase(phase_times, "reduced"):
        red_x = bta.solve(factor.reduced_factor, red_rhs, counter=counter)
    for k, t in enumerate(seps):
        X[t * b : (t + 1) * b] = red_x[k * b : (k + 1) * b]
    if a > 0:
        X[n * b :] = red_x[n_red * b :]
    x_tip = X[n * b :]

    with _phase(phase_times, "backward"):
        for pf, y in zip(factor.partitions, ys):
            x_left = (
                X[pf.left * b : (pf.left + 1) * b] if pf.left is not None else None
            )
            x_right = (
                X[pf.right * b : (pf.right + 1) * b] if pf.right is not None else None
            )
            for j in range(pf.hi - 1, pf.lo - 1, -1):
                r = j - pf.lo
                seg = y[r * b : (r + 1) * b].copy()
                if j + 1 < pf.hi:
                    seg -= pf.sub_factors[r].T @ X[(j + 1) * b : (j + 2) * b]
                elif pf.right is not None:
                    seg -= pf.right_factor.T @ x_right
                if pf.left is not None:
                    seg -= pf.left_factors[r].T @ x_left
                if use_arrow:
                    seg -= pf.arrow_factors[r].T @ x_tip
                X[j * b : (j + 1) * b] = solve_triangular(
                    pf.diag_factors[r], seg, lower=True, trans="T", check_finite=False
                )
                if counter is not None:
                    counter.charge(b**2)
    return x if squeeze else X


def d_selected_invert(factor, counter=None, mapper=None, phase_times=None):
    """Pattern entries of the inverse from the partitioned factorization.

    The reduced system's selected inverse provides the inverse entries on all
    separator and tip positions (including the fill coupling each interior
    partition's two separators); each partition then runs the backward
    recursion over its interior, needing only those boundary entries.
    """
    if factor.sequential is not None:
        with _phase(phase_times, "total"):
            return bta.selected_invert(factor.sequential, counter=counter)
    n, b, a = factor.n_blocks, factor.block_size, factor.arrow_size
    use_arrow = factor.has_arrow
    inv = BTAMatrix(n, b, a)
    with _phase(phase_times, "reduced"):
        red_inv = bta.selected_invert(factor.reduced_factor, counter=counter)

    seps = factor.separators
    for k, t in enumerate(seps):
        inv.diag[t] = red_inv.diag[k]
        if use_arrow:
            inv.arrow[t] = red_inv.arrow[k]
        if k + 1 < len(seps) and seps[k + 1] == t + 1:
            inv.lower[t] = red_inv.lower[k]
    if a > 0:
        inv.tip[...] = red_inv.tip

    def job(pf):
        return _invert_partition_interior(factor, red_inv, pf, counter)

    parts = [pf for pf in factor.partitions if pf.interior_count > 0]
    with _phase(phase_times, "recover"):
        if mapper is None:
            results = [job(pf) for pf in parts]
        else:
            results = list(mapper(job, parts))

    for pf, (diag_blocks, lower_blocks, arrow_blocks) in zip(parts, results):
        for j in range(pf.lo, pf.hi):
            inv.diag[j] = diag_blocks[j - pf.lo]
            if use_arrow:
                inv.arrow[j] = arrow_blocks[j - pf.lo]
        for j, blk in lower_blocks:
            inv.lower[j] = blk
    return inv


def _invert_partition_interior(factor, red_inv, pf, counter=None):
    """Backward selected-inverse recursion over one partition's interior."""
    b, a = factor.block_size, factor.arrow_size
    use_arrow = factor.has_arrow
    k = pf.interior_count
    eye_b = np.eye(b)

    diag_blocks = np.zeros((k, b, b))
    arrow_blocks = np.zeros((k, a, b)) if use_arrow else None
    lower_blocks = []

    has_left = pf.left is not None
    has_right = pf.right is not None
    x_ll = red_inv.diag[factor.sep_pos[pf.left]] if has_left else None
    x_al = red_inv.arrow[factor.sep_pos[pf.left]] if (has_left and use_arrow) else None
    x_tt = red_inv.tip if use_arrow else None

    # state at the block after j: inverse entries for (next, next), (left,
    # next) and (arrow, next)
    if has_right:
        pos_r = factor.sep_pos[pf.right]
        x_next_next = red_inv.diag[pos_r]
        x_l_next = red_inv.lower[factor.sep_pos[pf.left]].T if has_left else None
        x_a_next = red_inv.arrow[pos_r] if use_arrow else None
    else:
        x_next_next = None
        x_l_next = None
        x_a_next = None

    for j in range(pf.hi - 1, pf.lo - 1, -1):
        r = j - pf.lo
        pivot_inv = solve_triangular(
            pf.diag_factors[r], eye_b, lower=True, check_finite=False
        )
        if j + 1 < pf.hi:
            coupler = pf.sub_factors[r]
        elif has_right:
            coupler = pf.right_factor
        else:
            coupler = None
        g_left = pf.left_factors[r] if has_left else None
        g_arrow = pf.arrow_factors[r] if use_arrow else None

        x_next_j = None
        if coupler is not None:
            acc = x_next_next @ coupler
            if has_left:
                acc += x_l_next.T @ g_left
            if use_arrow:
                acc += x_a_next.T @ g_arrow
            x_next_j = -(acc @ pivot_inv)
        x_l_j = None
        if has_left:
            acc = x_ll @ g_left
            if coupler is not None:
                acc += x_l_next @ coupler
            if use_arrow:
                acc += x_al.T @ g_arrow
            x_l_j = -(acc @ pivot_inv)
        x_a_j = None
        if use_arrow:
            acc = x_tt @ g_arrow
            if coupler is not None:
                acc += x_a_next @ coupler
            if has_left:
                acc += x_al @ g_left
            x_a_j = -(acc @ pivot_inv)

        acc = pivot_inv.T
        if x_next_j is not None:
            acc = acc - x_next_j.T @ coupler
        if x_l_j is not None:
            acc = acc - x_l_j.T @ g_left
        if x_a_j is not None:
            acc = acc - x_a_j.T @ g_arrow
        x_jj = acc @ pivot_inv
        if counter is not None:
            counter.charge(b**3)
            if has_left:
                counter.charge(b**3)
            if use_arrow:
                counter.charge(a**3)

        diag_blocks[r] = x_jj
        if use_arrow:
            arrow_blocks[r] = x_a_j
        if x_next_j is not None:
            lower_blocks.append((j, x_next_j))
        if j == pf.lo and has_left:
            lower_blocks.append((pf.lo - 1, x_l_j.T))

        x_next_next = x_jj
        x_l_next = x_l_j
        x_a_next = x_a_j
    return diag_blocks, lower_blocks, arrow_blocks
