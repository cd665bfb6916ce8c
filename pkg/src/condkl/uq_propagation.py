"""Forward propagation of Gaussian field models through the diffusion solver.

Monte Carlo uses per-realization substreams and a fixed batch size, and
merges batch statistics in batch order, so results are bitwise independent
of the number of worker threads. Collocation uses a Smolyak combination of
probabilists' Gauss-Hermite rules with ``m(i) = i`` points at 1D level ``i``.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .conditioning import as_model
from .grid import MomentField, field_l2_norm
from .pde_solver import DiffusionProblem, SolverError, solve_diffusion
from .rng import standard_normals

__all__ = [
    "MomentField",
    "SparseGridRule",
    "collocation_moments",
    "field_l2_norm",
    "monte_carlo_convergence",
    "monte_carlo_moments",
    "smolyak_grid",
]

MC_STREAM = 0
BATCH_SIZE = 64
MERGE_DECIMALS = 12


@dataclass(frozen=True, eq=False)
class SparseGridRule:
    dim: int
    level: int
    nodes: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.weights)


def _gauss_hermite(m):
    t, w = hermegauss(m)
    return t, w / w.sum()


def _compositions(total, parts):
    """All tuples of ``parts`` nonnegative ints summing to ``total``."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def smolyak_grid(d: int, level: int) -> SparseGridRule:
    """Smolyak sparse grid for ``N(0, I_d)`` expectations.

    Level ``l`` combines tensor rules with ``|i| - d`` in
    ``[max(0, l - d), l - 1]`` using coefficients
    ``(-1)^(q - |i|) binom(d - 1, q - |i|)``, ``q = d + l - 1``; coinciding
    nodes are merged and their weights summed. Level 1 is the single node 0.
    """
    if d < 1 or level < 1:
        raise ValueError("need d >= 1 and level >= 1")
    q = d + level - 1
    rules = {m: _gauss_hermite(m) for m in range(1, level + 1)}
    acc = {}
    for excess in range(max(0, level - d), level):
        coef = (-1) ** (q - d - excess) * comb(d - 1, q - d - excess)
        # only dimensions with i_k > 1 carry non-zero nodes
        for active in range(1, min(d, excess) + 1) if excess else [0]:
            for extra in _compositions(excess - active, active) if active else [()]:
                sizes = [e + 2 for e in extra]
                for dims in combinations(range(d), active):
                    _accumulate(acc, d, dims, sizes, rules, coef)
    keys = sorted(acc)
    weights = np.array([acc[k][1] for k in keys])
    nodes = np.array([acc[k][0] for k in keys]).reshape(len(keys), d)
    return SparseGridRule(d, level, nodes, weights)


def _accumulate(acc, d, dims, sizes, rules, coef):
    if not dims:
        key = (0.0,) * d
        node, w = acc.get(key, (np.zeros(d), 0.0))
        acc[key] = (node, w + coef)
        return
    grids = np.meshgrid(*[rules[m][0] for m in sizes], indexing="ij")
    wgrid = np.ones_like(grids[0])
    for axis, m in enumerate(sizes):
        shape = [1] * len(sizes)
        shape[axis] = m
        wgrid = wgrid * rules[m][1].reshape(shape)
    pts = np.column_stack([g.ravel() for g in grids])
    for p, w in zip(pts, wgrid.ravel()):
        full = np.zeros(d)
        full[list(dims)] = p
        key = tuple(np.round(full, MERGE_DECIMALS) + 0.0)
        node, w0 = acc.get(key, (full, 0.0))
        acc[key] = (node, w0 + coef * w)


def ordered_map(fn, items, threads):
    if threads is None or threads <= 1:
        return map(fn, items)
    pool = ThreadPoolExecutor(max_workers=threads)
    try:
        return list(pool.map(fn, items))
    finally:
        pool.shutdown()


def solve_batch(model, problem, zetas, offset):
    g = model.realize(zetas)
    u = np.empty_like(g)
    for row in range(len(g)):
        try:
            u[row] = solve_diffusion(problem, np.exp(g[row])).values
        except (SolverError, ValueError) as exc:
            raise SolverError(f"solve failed for sample {offset + row}: {exc}",
                              index=offset + row) from exc
    return g, u


class _Moments:
    """Chan-style merge of (count, mean, M2); merge order is the caller's."""

    def __init__(self, n_nodes):
        self.count = 0
        self.mean = np.zeros(n_nodes)
        self.m2 = np.zeros(n_nodes)

    def merge(self, batch):
        nb = len(batch)
        mb = batch.mean(axis=0)
        m2b = ((batch - mb) ** 2).sum(axis=0)
        if self.count == 0:
            self.count, self.mean, self.m2 = nb, mb, m2b
            return
        n = self.count + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + delta**2 * (self.count * nb / n)
        self.count = n

    def field(self):
        return MomentField(self.mean.copy(), np.sqrt(self.m2 / (self.count - 1)))


def _mc_batches(model, problem, n, seed, threads, batch_size):
    model = as_model(model)
    if n < 2:
        raise ValueError("Monte Carlo needs at least 2 samples")
    starts = list(range(0, n, batch_size))

    def work(start):
        count = min(batch_size, n - start)
        zetas = standard_normals(seed, MC_STREAM, start, count, model.r)
        return solve_batch(model, problem, zetas, start)

    stats_g = _Moments(model.grid.n)
    stats_u = _Moments(model.grid.n)
    chunk = max(1, threads or 1) * 4
    for lo in range(0, len(starts), chunk):
        for g, u in ordered_map(work, starts[lo:lo + chunk], threads):
            stats_g.merge(g)
            stats_u.merge(u)
            yield stats_g, stats_u


def monte_carlo_moments(model, problem: DiffusionProblem, n: int, seed: int,
                        threads=1, batch_size=BATCH_SIZE):
    """Sample mean and (n-1)-normalized std of ``g`` and ``u`` from ``n`` draws.

    Returns
    -------
    (MomentField, MomentField)
        Moments of the coefficient log-field and of the solution.
    """
    for stats_g, stats_u in _mc_batches(model, problem, n, seed, threads, batch_size):
        pass
    return stats_g.field(), stats_u.field()


def monte_carlo_convergence(model, problem, n, seed, threads=1, batch_size=BATCH_SIZE):
    """L2 norms of the running MC estimators after every batch.

    Returns rows ``(count, |mean u|, |std u|, |mean g|, |std g|)`` and the
    final moments.
    """
    grid = as_model(model).grid
    rows = []
    for stats_g, stats_u in _mc_batches(model, problem, n, seed, threads, batch_size):
        fu, fg = stats_u.field(), stats_g.field()
        rows.append((stats_u.count, field_l2_norm(fu.mean, grid), field_l2_norm(fu.std, grid),
                     field_l2_norm(fg.mean, grid), field_l2_norm(fg.std, grid)))
    return rows, stats_g.field(), stats_u.field()


def _finish(first, second):
    var = second - first * first
    neg = var < 0
    return MomentField(first, np.sqrt(np.where(neg, 0.0, var)), int(neg.sum()))


def collocation_moments(model, problem: DiffusionProblem, rule: SparseGridRule, threads=1):
    """Sparse-grid estimates of the mean and std of ``g`` and ``u``.

    Negative quadrature variances are clipped to zero and counted in
    ``MomentField.n_clipped``.
    """
    model = as_model(model)
    if rule.dim != model.r:
        raise ValueError(f"rule dimension {rule.dim} != model dimension {model.r}")
    starts = list(range(0, len(rule), BATCH_SIZE))

    def work(start):
        g, u = solve_batch(model, problem, rule.nodes[start:start + BATCH_SIZE], start)
        w = rule.weights[start:start + BATCH_SIZE]
        return w @ g, w @ (g * g), w @ u, w @ (u * u)

    sums = np.zeros((4, model.grid.n))
    chunk = max(1, threads or 1) * 4
    for lo in range(0, len(starts), chunk):
        for part in ordered_map(work, starts[lo:lo + chunk], threads):
            sums += np.asarray(part)
    return _finish(sums[0], sums[1]), _finish(sums[2], sums[3])
