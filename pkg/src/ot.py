"""
Optimal transport for the patchalign toolkit
Cosine costs, top-rho marginals, log-domain Sinkhorn and an exact small-instance oracle
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from src import config
from src.attnpool import retention_mask
from src.errors import NumericalError, ShapeError


logger = logging.getLogger(__name__)


@dataclass
class TransportPlan:
    """
    A coupling between two discrete marginals.

    Attributes:
        p: S_a x S_b nonnegative plan
        a: row marginal
        b: column marginal
        iterations: solver iterations used (0 for the exact oracle)
    """
    p: np.ndarray
    a: np.ndarray
    b: np.ndarray
    iterations: int = 0

    def row_residual(self) -> float:
        return float(np.abs(self.p.sum(axis=1) - self.a).sum())

    def column_residual(self) -> float:
        return float(np.abs(self.p.sum(axis=0) - self.b).sum())

    def marginal_residual(self) -> float:
        """||P1 - a||_1 + ||P^T 1 - b||_1"""
        return self.row_residual() + self.column_residual()

    def to_dict(self) -> dict:
        return {
            "plan": self.p.tolist(),
            "row_residual": self.row_residual(),
            "column_residual": self.column_residual(),
            "marginal_residual": self.marginal_residual(),
            "iterations": self.iterations,
            "total_mass": float(self.p.sum())
        }


def cosine_cost(e: np.ndarray, e_syn: np.ndarray) -> np.ndarray:
    """
    Pairwise cosine cost C[s, t] = 1 - cos(e_s, e_syn_t), clipped to [0, 2].

    Raises:
        NumericalError: a row has zero norm
        ShapeError: feature widths differ
    """
    e = np.asarray(e, dtype=np.float64)
    e_syn = np.asarray(e_syn, dtype=np.float64)
    if e.shape[-1] != e_syn.shape[-1]:
        raise ShapeError(f"patch widths {e.shape[-1]} and {e_syn.shape[-1]} differ")
    ne = np.linalg.norm(e, axis=-1, keepdims=True)
    ns = np.linalg.norm(e_syn, axis=-1, keepdims=True)
    if np.any(ne < config.NORM_FLOOR) or np.any(ns < config.NORM_FLOOR):
        raise NumericalError("cosine_cost needs nonzero rows")
    cos = (e / ne) @ np.swapaxes(e_syn / ns, -1, -2)
    return np.clip(1.0 - cos, 0.0, 2.0)


def ot_marginals(w: np.ndarray, rho: float = config.RHO,
                 mode: str = config.DEFAULT_RETENTION_MODE) -> np.ndarray:
    """
    Top-rho retention of patch weights, renormalised to the simplex.

    Raises:
        NumericalError: no mass on the retained support
    """
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise NumericalError("marginal weights must be nonnegative")
    kept = np.where(retention_mask(w, rho, mode), w, 0.0)
    mass = kept.sum(axis=-1, keepdims=True)
    if np.any(mass <= 0):
        raise NumericalError("marginal has empty support")
    return kept / mass


def _check_instance(c: np.ndarray, a: np.ndarray, b: np.ndarray) -> None:
    if c.ndim != 2 or c.shape != (a.shape[0], b.shape[0]):
        raise ShapeError(f"cost {c.shape} does not match marginals {a.shape}, {b.shape}")
    if np.any(a < 0) or np.any(b < 0) or not a.any() or not b.any():
        raise NumericalError("marginals must be nonnegative with nonempty support")


def sinkhorn(c: np.ndarray, a: np.ndarray, b: np.ndarray, eps: float = config.OT_EPS,
             iters: int = config.OT_ITERS, tol: Optional[float] = None) -> Tuple[TransportPlan, float]:
    """
    Entropic optimal transport by log-domain Sinkhorn.

    Each iteration updates the column potential and then the row potential,
    so the returned plan matches the row marginal up to rounding. Zero-mass
    rows and columns are removed before solving and come back as zeros.

    Args:
        c: S_a x S_b cost matrix
        a, b: marginals
        eps: Entropic regularisation
        iters: Iteration count (upper bound when tol is given)
        tol: Optional residual threshold; stops early once the column
            residual falls below it (diagnostics only)

    Returns:
        (TransportPlan, transport cost <P, C>)

    Raises:
        NumericalError: kernel not representable for this eps and float type
    """
    c = np.asarray(c)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_instance(c, a, b)
    if eps <= 0 or iters < 1:
        raise ValueError("eps must be positive and iters at least 1")
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        log_kernel = -c / c.dtype.type(eps) if np.issubdtype(c.dtype, np.floating) else -c / eps
    if not np.all(np.isfinite(log_kernel)):
        raise NumericalError(f"Sinkhorn kernel overflows at eps={eps} for {c.dtype} costs")
    log_kernel = log_kernel.astype(np.float64)

    rows, cols = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    lk = log_kernel[np.ix_(rows, cols)]
    log_a, log_b = np.log(a[rows]), np.log(b[cols])

    f = np.zeros(len(rows))
    used = 0
    for used in range(1, iters + 1):
        g = eps * log_b - eps * logsumexp(lk + f[:, None] / eps, axis=0)
        f = eps * log_a - eps * logsumexp(lk + g[None, :] / eps, axis=1)
        if tol is not None:
            col_sums = np.exp(lk + (f[:, None] + g[None, :]) / eps).sum(axis=0)
            if np.abs(col_sums - b[cols]).sum() < tol:
                break
    if tol is not None and used == iters:
        logger.warning(f"Sinkhorn hit the iteration cap ({iters}) before reaching tol={tol}")

    plan = np.zeros((a.shape[0], b.shape[0]))
    plan[np.ix_(rows, cols)] = np.exp(lk + (f[:, None] + g[None, :]) / eps)
    if not np.all(np.isfinite(plan)):
        raise NumericalError("Sinkhorn produced a non-finite plan")
    cost = float(np.sum(plan * c))
    return TransportPlan(p=plan, a=a, b=b, iterations=used), cost


# ---------------------------------------------------------------------------
# Exact oracle: transportation simplex
# ---------------------------------------------------------------------------

def _northwest_corner(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    """Initial basic feasible solution with exactly m + n - 1 basic cells"""
    m, n = len(a), len(b)
    supply, demand = a.copy(), b.copy()
    x = np.zeros((m, n))
    basis = []
    i = j = 0
    while i < m and j < n:
        amount = min(supply[i], demand[j])
        x[i, j] = amount
        basis.append((i, j))
        supply[i] -= amount
        demand[j] -= amount
        if i == m - 1 and j == n - 1:
            break
        if (supply[i] <= demand[j] or j == n - 1) and i < m - 1:
            demand[j] = max(demand[j], 0.0)
            i += 1
        else:
            j += 1
    return x, basis


def _potentials(c: np.ndarray, basis: List[Tuple[int, int]]) -> Tuple[np.ndarray, np.ndarray]:
    """Solve u_i + v_j = c_ij over the basis tree with u_0 = 0"""
    m, n = c.shape
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    pending = list(basis)
    while pending:
        remaining = []
        for i, j in pending:
            if not np.isnan(u[i]):
                v[j] = c[i, j] - u[i]
            elif not np.isnan(v[j]):
                u[i] = c[i, j] - v[j]
            else:
                remaining.append((i, j))
        if len(remaining) == len(pending):
            raise NumericalError("transportation basis is not a spanning tree")
        pending = remaining
    return u, v


def _cycle(basis: List[Tuple[int, int]], enter: Tuple[int, int]) -> List[Tuple[int, int]]:
    """Cells of the unique cycle created by adding `enter` to the basis tree"""
    # path in the bipartite tree from row node enter[0] to column node enter[1]
    start, goal = ("r", enter[0]), ("c", enter[1])
    adjacency = {}
    for i, j in basis:
        adjacency.setdefault(("r", i), []).append(("c", j))
        adjacency.setdefault(("c", j), []).append(("r", i))
    parent = {start: None}
    frontier = [start]
    while frontier and goal not in parent:
        nxt = []
        for node in frontier:
            for neighbour in adjacency.get(node, []):
                if neighbour not in parent:
                    parent[neighbour] = node
                    nxt.append(neighbour)
        frontier = nxt
    if goal not in parent:
        raise NumericalError("entering cell does not close a cycle")
    path = []
    node = goal
    while parent[node] is not None:
        prev = parent[node]
        row = node[1] if node[0] == "r" else prev[1]
        col = node[1] if node[0] == "c" else prev[1]
        path.append((row, col))
        node = prev
    path.reverse()
    return [enter] + path


def lp_oracle(c: np.ndarray, a: np.ndarray, b: np.ndarray,
              max_dim: int = config.LP_ORACLE_MAX_DIM) -> Tuple[TransportPlan, float]:
    """
    Exact optimal transport cost for small instances.

    Starts from the north-west-corner vertex of the transportation polytope
    and pivots between adjacent vertices (reduced-cost test, Bland's rule)
    until no improving edge remains.

    Raises:
        ShapeError: instance larger than max_dim x max_dim
    """
    c = np.asarray(c, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_instance(c, a, b)
    if max(c.shape) > max_dim:
        raise ShapeError(f"lp_oracle handles at most {max_dim}x{max_dim}, got {c.shape}")

    rows, cols = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    sub_c = c[np.ix_(rows, cols)]
    sub_a = a[rows]
    sub_b = b[cols] * (sub_a.sum() / b[cols].sum())

    x, basis = _northwest_corner(sub_a, sub_b)
    m, n = sub_c.shape
    pivots = 0
    max_pivots = 50 * (m + n) ** 2
    while pivots < max_pivots:
        u, v = _potentials(sub_c, basis)
        reduced = sub_c - u[:, None] - v[None, :]
        basic = set(basis)
        enter = None
        for i in range(m):
            for j in range(n):
                if (i, j) not in basic and reduced[i, j] < -1e-12:
                    enter = (i, j)
                    break
            if enter is not None:
                break
        if enter is None:
            break
        cycle = _cycle(basis, enter)
        minus = cycle[1::2]
        theta = min(x[cell] for cell in minus)
        leaving = min(cell for cell in minus if x[cell] == theta)
        for k, cell in enumerate(cycle):
            x[cell] += theta if k % 2 == 0 else -theta
        x[leaving] = 0.0
        basis.remove(leaving)
        basis.append(enter)
        pivots += 1
    else:
        raise NumericalError(f"transportation simplex did not terminate in {max_pivots} pivots")

    x = np.maximum(x, 0.0)
    plan = np.zeros(c.shape)
    plan[np.ix_(rows, cols)] = x
    cost = float(np.sum(plan * c))
    logger.debug(f"lp_oracle: {pivots} pivots, cost={cost:.6g}")
    return TransportPlan(p=plan, a=a, b=b, iterations=0), cost
