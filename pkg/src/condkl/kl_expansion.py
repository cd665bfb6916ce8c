"""Nystrom discretization of covariance eigenproblems and KL representations."""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .grid import StructuredGrid
from .kernel_gp import KernelHyperparams, cov_matrix

NEGATIVE_EIG_TOL = 1e-10


class AsymmetricKernel(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class KLBasis:
    """Mean field plus ``d`` eigenpairs sampled on a grid.

    ``eigenfunctions`` holds one field per column and is orthonormal under
    the grid quadrature. ``total_variance`` is the trace of the discretized
    operator, i.e. the sum over the full spectrum, retained or not.
    """

    grid: StructuredGrid
    mean: np.ndarray
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    total_variance: float

    @property
    def d(self) -> int:
        return len(self.eigenvalues)

    @property
    def modes(self) -> np.ndarray:
        return self.eigenfunctions * np.sqrt(self.eigenvalues)

    def truncated(self, d: int) -> "KLBasis":
        if not 1 <= d <= self.d:
            raise ValueError(f"cannot truncate a {self.d}-term basis to {d} terms")
        return KLBasis(
            self.grid,
            self.mean,
            self.eigenvalues[:d].copy(),
            self.eigenfunctions[:, :d].copy(),
            self.total_variance,
        )

    def with_mean(self, mean) -> "KLBasis":
        return KLBasis(self.grid, np.asarray(mean, dtype=float), self.eigenvalues,
                       self.eigenfunctions, self.total_variance)


def truncate_by_variance(eigenvalues, fraction, total=None) -> int:
    """Smallest ``d`` with ``sum(lambda[:d]) >= fraction * total``.

    ``total`` defaults to the sum of the given eigenvalues; pass the operator
    trace when only the leading part of the spectrum is available.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if total is None:
        total = lam.sum()
    if not total > 0:
        raise ValueError("cannot truncate an all-zero spectrum")
    cum = np.cumsum(lam)
    # relative slack so fraction=1 is reachable despite rounding
    hit = np.flatnonzero(cum >= fraction * total * (1 - 1e-12))
    if len(hit) == 0:
        raise ValueError(
            f"leading {len(lam)} eigenvalues hold only {cum[-1] / total:.4f} of the variance"
        )
    return int(hit[0]) + 1


def _clip(lam):
    lam = np.asarray(lam, dtype=float)
    floor = -NEGATIVE_EIG_TOL * max(lam[0], 0.0)
    if np.any(lam < floor):
        warnings.warn(f"covariance has negative eigenvalue {lam.min():.3e}; clipped to 0")
    return np.maximum(lam, 0.0)


def _top_eigh(S, k):
    n = len(S)
    if k >= n:
        lam, vec = linalg.eigh(S, check_finite=False)
    else:
        lam, vec = linalg.eigh(S, subset_by_index=[n - k, n - 1], driver="evr",
                               check_finite=False)
    return lam[::-1], vec[:, ::-1]


def solve_kernel_eigenproblem(grid: StructuredGrid, cov, d_max=None, *, fraction=None,
                              symmetry_tol=1e-8) -> KLBasis:
    """Leading eigenpairs of a covariance operator by the Nystrom method.

    Parameters
    ----------
    grid : StructuredGrid
    cov : callable or array
        Either ``cov(A, B) -> matrix`` evaluated on point lists, or the
        precomputed ``n x n`` matrix on the grid nodes.
    d_max : int, optional
        Number of eigenpairs to return. Defaults to all of them.
    fraction : float, optional
        If given, enough eigenpairs are computed to retain this fraction of
        the trace and the basis is truncated there (``d_max`` is then the
        initial batch size).

    Returns
    -------
    KLBasis
        Zero-mean basis, eigenvalues sorted non-increasing.
    """
    n = grid.n
    if callable(cov):
        C = np.asarray(cov(grid.points, grid.points), dtype=float)
    else:
        C = np.array(cov, dtype=float)
    if C.shape != (n, n):
        raise ValueError(f"covariance matrix must be {n}x{n}, got {C.shape}")
    scale = np.abs(C).max()
    asym = np.abs(C - C.T).max() if n <= 4096 else max(
        np.abs(C[i:i + 512] - C[:, i:i + 512].T).max() for i in range(0, n, 512))
    if asym > symmetry_tol * max(scale, 1e-300):
        raise AsymmetricKernel(f"covariance asymmetric by {asym:.3e}")

    sw = np.sqrt(grid.weights)
    # S = W^1/2 C W^1/2, formed in place
    C *= sw[:, None]
    C *= sw[None, :]
    C += C.T
    C *= 0.5
    total = float(np.trace(C))

    k = n if d_max is None else int(d_max)
    if not 1 <= k <= n:
        raise ValueError(f"d_max must lie in [1, {n}]")
    if fraction is None:
        lam, vec = _top_eigh(C, k)
    else:
        k = min(k, n) if d_max is not None else min(n, 256)
        while True:
            lam, vec = _top_eigh(C, k)
            if k == n or np.sum(np.maximum(lam, 0)) >= fraction * total * (1 - 1e-12):
                break
            k = min(2 * k, n)
        lam = _clip(lam)
        d = truncate_by_variance(lam, fraction, total)
        lam, vec = lam[:d], vec[:, :d]
    lam = _clip(lam)
    phi = vec / sw[:, None]
    return KLBasis(grid, np.zeros(n), lam, phi, total)


def _axis_eig(coords, h, length, factor):
    c = np.exp(-np.subtract.outer(coords, coords) ** 2 / length**2) * (factor * h)
    lam, vec = linalg.eigh(c, check_finite=False)
    return lam[::-1], vec[:, ::-1] / np.sqrt(h)


def separable_kl_basis(grid: StructuredGrid, theta: KernelHyperparams, d_max=None,
                       *, fraction=None) -> KLBasis:
    """Unconditional SE basis from the tensor structure of the grid.

    On a tensor grid the weighted SE kernel matrix is the Kronecker product
    of two 1D matrices, so its eigenpairs are products of 1D eigenpairs. The
    result equals the dense Nystrom solve up to roundoff (and up to the
    choice of basis inside degenerate clusters).
    """
    lx, vx = _axis_eig(grid.x, grid.hx, theta.l1, 1.0)
    ly, vy = _axis_eig(grid.y, grid.hy, theta.l2, theta.sigma**2)
    prod = np.outer(ly, lx).ravel()  # index jy * nx + ix
    order = np.argsort(-prod, kind="stable")
    total = theta.sigma**2 * float(grid.weights.sum())
    lam = _clip(prod[order])
    if fraction is not None:
        d = truncate_by_variance(lam, fraction, total)
    else:
        d = grid.n if d_max is None else int(d_max)
    if not 1 <= d <= grid.n:
        raise ValueError(f"d_max must lie in [1, {grid.n}]")
    jy, ix = np.divmod(order[:d], grid.nx)
    # phi(x_i, y_j) = vx[i] vy[j], stored x1-fastest
    phi = (vy[:, jy][:, None, :] * vx[:, ix][None, :, :]).reshape(grid.n, d)
    return KLBasis(grid, np.zeros(grid.n), lam[:d], phi, total)


def evaluate_field(basis, xi) -> np.ndarray:
    """``mean + sum_i sqrt(lambda_i) phi_i xi_i``; ``xi`` may be a batch (m x d)."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != basis.d:
        raise ValueError(f"expected {basis.d} coefficients, got {xi.shape[-1]}")
    return basis.mean + (xi * np.sqrt(basis.eigenvalues)) @ basis.eigenfunctions.T


def covariance_from_basis(basis: KLBasis) -> np.ndarray:
    m = basis.modes
    return m @ m.T
