"""Rectangular linear assignment by shortest augmenting paths.

Rows are added one at a time; each addition runs a Dijkstra search over
reduced costs (Jonker-Volgenant style) and augments along the cheapest
path to a free column. Column scans are vectorised with numpy, so the
cost per row is O(n_cols) numpy work per visited column.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AssignmentProblem:
    cost: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cost, dtype=float)
        if c.ndim != 2:
            raise ValueError("cost matrix must be 2-D")
        if c.shape[0] > c.shape[1]:
            raise ValueError(f"need n_rows <= n_cols, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("cost matrix contains non-finite entries")
        if np.any(c < 0):
            raise ValueError("cost matrix contains negative entries")
        object.__setattr__(self, "cost", c)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cost.shape


def solve_assignment(problem: AssignmentProblem | np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-cost injective assignment of every row to a distinct column.

    Returns ``(col_for_row, total_cost)``. Ties between equally short paths
    go to the lowest column index, preferring unassigned columns, so a
    constant matrix yields the identity assignment.
    """
    if isinstance(problem, AssignmentProblem):
        cost = problem.cost
    else:
        cost = np.asarray(problem, dtype=float)
        if cost.ndim != 2:
            raise ValueError("cost matrix must be 2-D")
        if not np.all(np.isfinite(cost)):
            raise ValueError("cost matrix contains non-finite entries")
        if cost.shape[0] > cost.shape[1]:
            raise ValueError(f"need n_rows <= n_cols, got {cost.shape}")
    nr, nc = cost.shape

    u = np.zeros(nr)
    v = np.zeros(nc)
    col4row = np.full(nr, -1, dtype=np.int64)
    row4col = np.full(nc, -1, dtype=np.int64)

    for cur_row in range(nr):
        shortest = np.full(nc, np.inf)
        path = np.full(nc, -1, dtype=np.int64)
        remaining = np.ones(nc, dtype=bool)
        visited_rows = [cur_row]
        visited_cols = []
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink < 0:
            reduced = min_val + cost[i] - u[i] - v
            better = remaining & (reduced < shortest)
            shortest[better] = reduced[better]
            path[better] = i

            masked = np.where(remaining, shortest, np.inf)
            lowest = masked.min()
            if not np.isfinite(lowest):
                raise ValueError("assignment infeasible")
            ties = np.flatnonzero(masked == lowest)
            free = ties[row4col[ties] < 0]
            j = int(free[0]) if len(free) else int(ties[0])

            min_val = lowest
            remaining[j] = False
            visited_cols.append(j)
            if row4col[j] < 0:
                sink = j
            else:
                i = int(row4col[j])
                visited_rows.append(i)

        u[cur_row] += min_val
        for r in visited_rows[1:]:
            u[r] += min_val - shortest[col4row[r]]
        vc = np.asarray(visited_cols)
        v[vc] -= min_val - shortest[vc]

        j = sink
        while True:
            r = path[j]
            row4col[j] = r
            col4row[r], j = j, col4row[r]
            if r == cur_row:
                break

    total = float(sum(cost[r, col4row[r]] for r in range(nr)))
    return col4row, total
