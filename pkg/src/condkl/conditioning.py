"""Finite-dimensional conditional KL models.

Approach 1 conditions the GP on the data and then truncates the KL expansion
of the conditional covariance. Approach 2 truncates the unconditional
expansion first, conditions its coefficient vector, and rewrites the result
in terms of the ``r = d - N_s`` directions the data leave undetermined.
"""

from dataclasses import dataclass, field

import numpy as np

from .grid import MomentField, StructuredGrid
from .kernel_gp import (
    JITTER_LADDER,
    IllConditionedCovariance,
    KernelHyperparams,
    ObservationSet,
    gp_posterior,
)
from .kl_expansion import KLBasis, separable_kl_basis, solve_kernel_eigenproblem

RANK_TOL = 1e-8

APPROACH_1 = "approach-1"
APPROACH_2 = "approach-2"
UNCONDITIONAL = "unconditional"


class FullyDeterminedField(ValueError):
    """Conditioning left no stochastic dimensions (r = 0)."""


@dataclass(frozen=True, eq=False)
class ConditionalKLModel:
    """Gaussian field ``mean + modes @ zeta`` with ``zeta ~ N(0, I_r)``.

    ``modes`` has shape ``(n, r)``; each column is already scaled.
    """

    grid: StructuredGrid
    mean: np.ndarray
    modes: np.ndarray
    approach: str
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        modes = np.asarray(self.modes, dtype=float)
        if modes.ndim != 2 or modes.shape[0] != self.grid.n:
            raise ValueError("modes must have shape (n_nodes, r)")
        if modes.shape[1] < 1:
            raise ValueError("a model needs at least one mode")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))

    @property
    def r(self) -> int:
        return self.modes.shape[1]

    def realize(self, zeta) -> np.ndarray:
        """Field realizations for coefficient vectors ``zeta`` (r,) or (m, r)."""
        zeta = np.asarray(zeta, dtype=float)
        if zeta.shape[-1] != self.r:
            raise ValueError(f"expected {self.r} coefficients, got {zeta.shape[-1]}")
        return self.mean + zeta @ self.modes.T

    def covariance(self) -> np.ndarray:
        return self.modes @ self.modes.T

    def truncated(self, r: int) -> "ConditionalKLModel":
        if not 1 <= r <= self.r:
            raise ValueError(f"cannot keep {r} of {self.r} modes")
        info = dict(self.info)
        if "eigenvalues" in info:
            info["eigenvalues"] = info["eigenvalues"][:r]
        return ConditionalKLModel(self.grid, self.mean, self.modes[:, :r], self.approach, info)

    @classmethod
    def from_basis(cls, basis: KLBasis) -> "ConditionalKLModel":
        return cls(basis.grid, basis.mean, basis.modes, UNCONDITIONAL,
                   {"eigenvalues": basis.eigenvalues, "total_variance": basis.total_variance})


def as_model(obj) -> ConditionalKLModel:
    if isinstance(obj, ConditionalKLModel):
        return obj
    if isinstance(obj, KLBasis):
        return ConditionalKLModel.from_basis(obj)
    raise TypeError(f"expected a KL basis or model, got {type(obj).__name__}")


@dataclass(frozen=True, eq=False)
class ConditionedVariables:
    """Posterior of the truncated KL coefficients, ``xi | X, y ~ N(mu, M)``.

    ``eigvals``/``eigvecs`` give ``M = Q diag(D) Q^T`` with ``D`` sorted
    non-increasing; ``rank`` counts ``D > RANK_TOL * max(D)``.
    """

    mu: np.ndarray
    M: np.ndarray
    rank: int
    eigvals: np.ndarray
    eigvecs: np.ndarray
    jitter: float = 0.0


def condition_xi(obs: ObservationSet, theta: KernelHyperparams, basis: KLBasis) -> ConditionedVariables:
    """Condition the coefficients of a truncated KL expansion on point data.

    With ``A = Lambda^1/2 Phi(X)`` (d x N_s) the posterior is
    ``mu = A (A^T A + s^2 I)^-1 y`` and ``M = I - A (A^T A + s^2 I)^-1 A^T``.
    Both are evaluated through the SVD ``A = U S V^T``, which gives the
    eigendecomposition of ``M`` directly:
    ``M = U diag(s^2 / (S^2 + s^2), 1, ..., 1) U^T``.
    """
    d = basis.d
    phi_x = basis.grid.interpolate(basis.eigenfunctions, obs.locations)  # N x d
    A = (phi_x * np.sqrt(basis.eigenvalues)).T
    U, s, Vt = np.linalg.svd(A, full_matrices=True)
    s_full = np.zeros(obs.n)
    s_full[: len(s)] = s
    noise = theta.sigma_eps**2
    # eigenvalues of C_s^d + noise I are s_full^2 + noise
    jitter = 0.0
    top = max(s_full[0] ** 2 + noise, np.finfo(float).tiny)
    rcond = obs.n * np.finfo(float).eps
    if (s_full**2 + noise).min() <= rcond * top:
        for rel in JITTER_LADDER:
            jitter = rel * theta.sigma**2
            if (s_full**2 + noise + jitter).min() > rcond * top:
                break
        else:
            raise IllConditionedCovariance("truncated observation covariance is singular")
    var = noise + jitter

    k = len(s)
    shrink = np.ones(d)
    shrink[:k] = var / (s**2 + var)
    # M has the null directions of A^T at 1 and the data directions shrunk
    order = np.argsort(-shrink, kind="stable")
    D = shrink[order]
    Q = U[:, order]
    M = (Q * D) @ Q.T
    M = 0.5 * (M + M.T)
    mu = U[:, :k] @ ((s / (s**2 + var)) * (Vt[:k] @ obs.values))
    rank = int(np.sum(D > RANK_TOL * D.max())) if D.max() > 0 else 0
    if noise == 0:
        # without noise the exact M vanishes on range(A); jitter alone must not count
        tol = max(A.shape) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
        rank = min(rank, d - int(np.sum(s > tol)))
    return ConditionedVariables(mu, M, rank, D, Q, jitter)


def condition_then_truncate(obs, theta, grid: StructuredGrid, d_c=None, *, fraction=0.99) -> ConditionalKLModel:
    """Approach 1: KL expansion of the kriging covariance, truncated.

    ``d_c`` fixes the number of modes; otherwise the expansion keeps
    ``fraction`` of the conditional variance.
    """
    mean, cov = gp_posterior(obs, theta, grid.points)
    if d_c is None:
        basis = solve_kernel_eigenproblem(grid, cov, fraction=fraction)
    else:
        if d_c < 1:
            raise ValueError("d_c must be at least 1")
        basis = solve_kernel_eigenproblem(grid, cov, d_c)
    del cov
    return ConditionalKLModel(
        grid,
        mean,
        basis.modes,
        APPROACH_1,
        {"eigenvalues": basis.eigenvalues, "total_variance": basis.total_variance},
    )


def truncate_then_condition(obs, theta, grid: StructuredGrid, d=None, *, fraction=0.99,
                            basis: KLBasis = None) -> ConditionalKLModel:
    """Approach 2: condition a ``d``-term unconditional expansion, reduce to rank r.

    The returned modes are ``Phi Lambda^1/2 Q_r D_r^1/2`` so the implied
    covariance is exactly ``Phi Lambda^1/2 M Lambda^1/2 Phi^T``.
    """
    if basis is None:
        if d is None:
            basis = separable_kl_basis(grid, theta, fraction=fraction)
        else:
            basis = separable_kl_basis(grid, theta, d)
    elif d is not None:
        basis = basis.truncated(d)
    cv = condition_xi(obs, theta, basis)
    r = cv.rank
    if r == 0:
        raise FullyDeterminedField(
            f"{obs.n} noise-free observations determine all {basis.d} coefficients"
        )
    scaled = basis.eigenfunctions * np.sqrt(basis.eigenvalues)
    mean = basis.mean + scaled @ cv.mu
    modes = scaled @ (cv.eigvecs[:, :r] * np.sqrt(cv.eigvals[:r]))
    return ConditionalKLModel(
        grid,
        mean,
        modes,
        APPROACH_2,
        {"d": basis.d, "conditioned": cv, "unconditional_eigenvalues": basis.eigenvalues},
    )


def implied_moment_field(model) -> MomentField:
    model = as_model(model)
    return MomentField(model.mean, np.sqrt(np.einsum("ij,ij->i", model.modes, model.modes)))


def induced_eigenvalues(model, k=None) -> np.ndarray:
    """Nystrom eigenvalues of the covariance a model implies (leading ``k``).

    Uses the small ``r x r`` Gram matrix of the weighted modes.
    """
    model = as_model(model)
    B = model.modes * np.sqrt(model.grid.weights)[:, None]
    lam = np.linalg.eigvalsh(B.T @ B)[::-1]
    lam = np.maximum(lam, 0.0)
    return lam if k is None else lam[:k]
