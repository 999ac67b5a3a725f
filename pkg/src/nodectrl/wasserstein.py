"""Exact Wasserstein-1 distance between discrete measures."""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .core import CertificationError, DiscreteMeasure, PreconditionError

CS_TOL = 1e-9

_ot = None


def _pot():
    global _ot
    if _ot is None:
        # keep the optional array backends from loading; only numpy is needed
        for name in ("PYTORCH", "TENSORFLOW", "JAX", "CUPY"):
            os.environ.setdefault(f"POT_BACKEND_DISABLE_{name}", "1")
        import ot

        _ot = ot
    return _ot


@dataclass(frozen=True)
class W1Result:
    value: float
    plan: np.ndarray
    cs_residual: float


def _check(mu: DiscreteMeasure, nu: DiscreteMeasure) -> None:
    if not isinstance(mu, DiscreteMeasure) or not isinstance(nu, DiscreteMeasure):
        raise PreconditionError("wasserstein1 expects DiscreteMeasure inputs")
    if mu.d != nu.d:
        raise PreconditionError("measures live in different dimensions")


def wasserstein1_detailed(mu: DiscreteMeasure, nu: DiscreteMeasure) -> W1Result:
    """Optimal coupling by network simplex, certified by complementary slackness."""
    _check(mu, nu)
    a = np.array(mu.weights, float)
    b = np.array(nu.weights, float)
    b *= a.sum() / b.sum()
    M = cdist(mu.points, nu.points)
    ot = _pot()
    G, log = ot.emd(a, b, M, numItermax=max(100000, 50 * M.size), log=True)
    if log.get("result_code", 1) != 1:
        raise CertificationError(f"network simplex did not converge: {log.get('warning')}")
    u, v = np.asarray(log["u"]), np.asarray(log["v"])
    reduced = M - u[:, None] - v[None, :]
    scale = max(1.0, float(M.max()))
    dual_gap = float(max(0.0, -reduced.min()))
    support = G > 0
    slack = float(np.max(np.abs(reduced[support]))) if np.any(support) else 0.0
    residual = max(dual_gap, slack) / scale
    if residual >= CS_TOL:
        raise CertificationError(f"complementary slackness residual {residual:.3e} too large")
    return W1Result(float(np.sum(G * M)), G, residual)


def wasserstein1(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    return wasserstein1_detailed(mu, nu).value


# ---------------------------------------------------------------- brute force


def _tree_flow(edges, a, b):
    """Flows on a spanning tree of the bipartite graph, or None if not a spanning tree."""
    n, m = len(a), len(b)
    supply = np.concatenate([a, b]).astype(float)
    adj: dict[int, list[int]] = {v: [] for v in range(n + m)}
    for e, (i, j) in enumerate(edges):
        adj[i].append(e)
        adj[n + j].append(e)
    if any(not adj[v] for v in adj):
        return None
    flow = np.full(len(edges), np.nan)
    degree = {v: len(adj[v]) for v in adj}
    left = supply.copy()
    stack = [v for v in adj if degree[v] == 1]
    done = 0
    while stack:
        v = stack.pop()
        if degree[v] != 1:
            continue
        e = next(e for e in adj[v] if np.isnan(flow[e]))
        flow[e] = left[v]
        i, j = edges[e]
        other = n + j if v == i else i
        left[other] -= flow[e]
        degree[v] = 0
        degree[other] -= 1
        done += 1
        if degree[other] == 1:
            stack.append(other)
    if done != len(edges) or np.any(np.isnan(flow)):
        return None
    return flow


def wasserstein1_bruteforce(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Minimum over all vertices of the transportation polytope.

    Equal uniform weights on both sides reduce to permutations.  Otherwise
    every spanning tree of the bipartite atom graph is visited; limited to
    ``n * m <= 20``.
    """
    _check(mu, nu)
    n, m = len(mu), len(nu)
    C = cdist(mu.points, nu.points)
    a, b = np.asarray(mu.weights), np.asarray(nu.weights)
    if n == m and np.allclose(a, 1.0 / n, rtol=0, atol=1e-15) and np.allclose(b, 1.0 / m, rtol=0, atol=1e-15):
        if n > 8:
            raise PreconditionError("permutation enumeration limited to 8 atoms")
        return min(math.fsum(C[i, p[i]] for i in range(n)) / n for p in itertools.permutations(range(n)))
    if n * m > 20:
        raise PreconditionError("basis enumeration limited to n*m <= 20")
    cells = [(i, j) for i in range(n) for j in range(m)]
    best = math.inf
    for edges in itertools.combinations(cells, n + m - 1):
        flow = _tree_flow(edges, a, b)
        if flow is None or np.any(flow < -1e-14):
            continue
        cost = math.fsum(f * C[i, j] for f, (i, j) in zip(flow, edges))
        best = min(best, cost)
    return best
