"""Triple-layer worker allocation and deterministic task execution.

The outer layer spreads independent objective evaluations over groups of
workers, the middle layer runs the prior/conditional factorization pair of
one evaluation side by side, and the inner layer hands time-domain partitions
of one solve to separate workers.  Workers are in-process threads (the dense
block kernels release the GIL); the group topology is explicit in the
allocation so a different transport could replace the executor without
touching policy.  Results are always reduced in task-index order, so outputs
never depend on the worker count.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass


class TaskError(RuntimeError):
    """A task failed; carries the index of the first failing task."""

    def __init__(self, task_index, message):
        self.task_index = task_index
        super().__init__(f"task {task_index} failed: {message}")


def n_objective_tasks(dim_theta):
    """Central-difference task count: one central plus two per coordinate."""
    return 2 * dim_theta + 1


@dataclass(frozen=True)
class LayerAllocation:
    """Worker counts per parallel layer: g1 evaluation groups, g2 in {1, 2}
    for the precision-matrix pair, g3 solver partitions per group."""

    workers: int
    g1: int
    g2: int
    g3: int

    def __post_init__(self):
        if self.g1 * self.g2 * self.g3 > self.workers:
            raise ValueError("allocation exceeds the worker pool")
        if self.g2 not in (1, 2):
            raise ValueError("the precision-pair layer is at most two wide")

    def saturated_s1(self, dim_theta):
        return self.g1 >= n_objective_tasks(dim_theta)


def allocate(workers, dim_theta, memory_fits_single=True, min_partitions=2):
    """Greedy allocation: fill the evaluation layer first, then double into
    the pair layer, then grow solver partitions with whatever remains.

    When a single worker cannot hold the block-dense matrix
    (``memory_fits_single=False``), the solver layer is set first to
    ``min_partitions`` so every group fits, before the outer layers grow.
    """
    if workers < 1:
        raise ValueError("at least one worker required")
    n_eval = n_objective_tasks(dim_theta)
    g3 = 1
    if not memory_fits_single:
        g3 = max(1, min(min_partitions, workers))
    g1 = max(1, min(n_eval, workers // g3))
    g2 = 2 if (g1 >= n_eval and workers // (g1 * g3) >= 2) else 1
    g3 = max(g3, workers // (g1 * g2))
    return LayerAllocation(workers=workers, g1=g1, g2=g2, g3=g3)


@dataclass
class TaskTrace:
    """Execution record of one task for the benchmark trace CSV."""

    index: int
    group: int
    round: int
    start: float
    stop: float


def run_tasks(tasks, alloc=None, trace=None):
    """Execute independent zero-argument tasks, results in task-index order.

    Tasks are dealt round-robin by index over the evaluation groups (task i
    goes to group ``i % g1``); each group runs its share in index order.  The
    gathered result list is identical for any worker count.  A task failure
    is re-raised as :class:`TaskError` carrying the lowest failing index.
    """
    tasks = list(tasks)
    if not tasks:
        return []
    groups = 1 if alloc is None else max(1, min(alloc.g1, len(tasks)))
    results = [None] * len(tasks)
    failures = []

    def run_group(group):
        records = []
        for offset, index in enumerate(range(group, len(tasks), groups)):
            start = time.perf_counter()
            try:
                results[index] = tasks[index]()
            except Exception as exc:  # noqa: BLE001 - reported with task index
                failures.append((index, exc))
                return records
            records.append(
                TaskTrace(index, group, offset, start, time.perf_counter())
            )
        return records

    if groups == 1:
        records = run_group(0)
    else:
        with ThreadPoolExecutor(max_workers=groups) as pool:
            per_group = list(pool.map(run_group, range(groups)))
        records = [rec for group_records in per_group for rec in group_records]

    if failures:
        index, exc = min(failures, key=lambda pair: pair[0])
        raise TaskError(index, str(exc)) from exc
    if trace is not None:
        trace.extend(sorted(records, key=lambda rec: rec.index))
    return results


class TaskRunner:
    """Callable wrapper binding an allocation, for handing to the inference
    routines as their task execution hook."""

    def __init__(self, alloc=None, trace=None):
        self.alloc = alloc
        self.trace = trace

    def __call__(self, tasks):
        return run_tasks(tasks, self.alloc, self.trace)


def pair_runner(alloc):
    """Runner for the two-task precision-pair layer, or None when that layer
    is not widened."""
    if alloc is None or alloc.g2 < 2:
        return None
    two_wide = LayerAllocation(workers=2, g1=2, g2=1, g3=1)
    return TaskRunner(two_wide)
