"""Cell-centred finite-volume solver for ``-div(k grad u) = f`` on a rectangle.

Dirichlet data on the left/right edges, prescribed normal flux on the
bottom/top edges. Face transmissibilities use the harmonic mean of the two
adjacent cell coefficients; Dirichlet faces use the half-cell distance.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse

from .grid import StructuredGrid

RESIDUAL_TOL = 1e-10


class SolverError(RuntimeError):
    def __init__(self, message, residual=None, index=None):
        super().__init__(message)
        self.residual = residual
        self.index = index


@dataclass(frozen=True, eq=False)
class DiffusionProblem:
    """Boundary data and source for one deterministic solve.

    ``dirichlet_left``/``dirichlet_right`` are scalars or per-row arrays
    (length ``ny``); ``neumann_bottom``/``neumann_top`` give the outward
    normal flux ``k grad u . n`` as scalars or per-column arrays (length
    ``nx``); zero means no flow. ``source`` is a grid
    field, default zero.
    """

    grid: StructuredGrid
    dirichlet_left: object = 1.0
    dirichlet_right: object = 0.0
    source: np.ndarray = None
    neumann_bottom: object = 0.0
    neumann_top: object = 0.0

    def __post_init__(self):
        g = self.grid
        for name, size in (("dirichlet_left", g.ny), ("dirichlet_right", g.ny),
                           ("neumann_bottom", g.nx), ("neumann_top", g.nx)):
            value = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (size,))
            object.__setattr__(self, name, value)
        src = np.zeros(g.n) if self.source is None else np.asarray(self.source, dtype=float)
        if src.shape != (g.n,):
            raise ValueError("source must be a grid field")
        object.__setattr__(self, "source", src)


@dataclass(frozen=True, eq=False)
class SolutionField:
    values: np.ndarray
    residual: float = field(default=0.0)


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def _coefficients(problem: DiffusionProblem, k):
    """Transmissibilities and right-hand side on the ``(ny, nx)`` layout."""
    g = problem.grid
    k = np.asarray(k, dtype=float)
    if k.shape != (g.n,):
        raise ValueError(f"k must be a grid field of length {g.n}")
    if not np.all(np.isfinite(k)) or np.any(k <= 0):
        raise ValueError("diffusion coefficient must be finite and strictly positive")
    K = k.reshape(g.ny, g.nx)
    rx = g.hy / g.hx
    ry = g.hx / g.hy
    t_east = rx * _harmonic(K[:, :-1], K[:, 1:])    # (ny, nx-1)
    t_north = ry * _harmonic(K[:-1, :], K[1:, :])   # (ny-1, nx)
    t_left = 2.0 * rx * K[:, 0]
    t_right = 2.0 * rx * K[:, -1]

    diag = np.zeros((g.ny, g.nx))
    diag[:, :-1] += t_east
    diag[:, 1:] += t_east
    diag[:-1, :] += t_north
    diag[1:, :] += t_north
    diag[:, 0] += t_left
    diag[:, -1] += t_right

    rhs = problem.source.reshape(g.ny, g.nx) * (g.hx * g.hy)
    rhs = rhs.copy()
    rhs[:, 0] += t_left * problem.dirichlet_left
    rhs[:, -1] += t_right * problem.dirichlet_right
    rhs[0, :] += problem.neumann_bottom * g.hx
    rhs[-1, :] += problem.neumann_top * g.hx
    return diag, t_east, t_north, rhs


def assemble_system(problem: DiffusionProblem, k):
    """Sparse system matrix and right-hand side in node order ``i + nx*j``."""
    g = problem.grid
    diag, t_east, t_north, rhs = _coefficients(problem, k)
    idx = np.arange(g.n).reshape(g.ny, g.nx)
    rows = [idx.ravel(), idx[:, :-1].ravel(), idx[:, 1:].ravel(),
            idx[:-1, :].ravel(), idx[1:, :].ravel()]
    cols = [idx.ravel(), idx[:, 1:].ravel(), idx[:, :-1].ravel(),
            idx[1:, :].ravel(), idx[:-1, :].ravel()]
    vals = [diag.ravel(), -t_east.ravel(), -t_east.ravel(),
            -t_north.ravel(), -t_north.ravel()]
    A = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(g.n, g.n),
    )
    return A, rhs.ravel()


def _apply(diag, t_east, t_north, u):
    out = diag * u
    out[:, :-1] -= t_east * u[:, 1:]
    out[:, 1:] -= t_east * u[:, :-1]
    out[:-1, :] -= t_north * u[1:, :]
    out[1:, :] -= t_north * u[:-1, :]
    return out


def solve_diffusion(problem: DiffusionProblem, k_field) -> SolutionField:
    """Solve for cell-centre values of ``u`` given a positive coefficient field.

    The SPD system is factorized as a banded matrix with x2 as the fast
    index, so the bandwidth is ``ny``.
    """
    g = problem.grid
    diag, t_east, t_north, rhs = _coefficients(problem, k_field)
    nx, ny = g.nx, g.ny
    # upper band storage, internal order q = j + ny * i
    ab = np.zeros((ny + 1, g.n))
    ab[ny] = diag.T.ravel()
    north = np.zeros((nx, ny))
    north[:, 1:] = -t_north.T
    ab[ny - 1] = north.ravel()
    east = np.zeros((nx, ny))
    east[1:, :] = -t_east.T
    ab[0] = east.ravel()

    b = rhs.T.ravel()
    try:
        cb = linalg.cholesky_banded(ab, lower=False, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SolverError(f"system matrix not positive definite: {exc}") from exc
    x = linalg.cho_solve_banded((cb, False), b, check_finite=False)
    u = x.reshape(nx, ny).T

    scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
    r = rhs - _apply(diag, t_east, t_north, u)
    res = np.linalg.norm(r) / scale
    if res > RESIDUAL_TOL:
        dx = linalg.cho_solve_banded((cb, False), r.T.ravel(), check_finite=False)
        u = u + dx.reshape(nx, ny).T
        r = rhs - _apply(diag, t_east, t_north, u)
        res = np.linalg.norm(r) / scale
        if res > RESIDUAL_TOL:
            raise SolverError(f"relative residual {res:.3e} above {RESIDUAL_TOL:g}", residual=res)
    return SolutionField(u.ravel(), float(res))
