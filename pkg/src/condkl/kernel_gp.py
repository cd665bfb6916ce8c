"""Squared-exponential GP prior, type-II maximum likelihood and kriging."""

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg, optimize

# jitter ladder, in units of sigma^2, tried after a plain factorization fails
JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
NOISE_OFFSET = 1e-6


class IllConditionedCovariance(np.linalg.LinAlgError):
    """Observation covariance could not be factorized even with max jitter."""


@dataclass(frozen=True)
class KernelHyperparams:
    sigma: float
    l1: float
    l2: float
    sigma_eps: float = 0.0

    def __post_init__(self):
        if not (self.sigma > 0 and self.l1 > 0 and self.l2 > 0):
            raise ValueError(f"sigma, l1, l2 must be positive: {self}")
        if not self.sigma_eps >= 0:
            raise ValueError(f"sigma_eps must be nonnegative: {self}")

    def replace(self, **changes) -> "KernelHyperparams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "l1": self.l1,
            "l2": self.l2,
            "sigma_eps": self.sigma_eps,
        }


class ObservationSet:
    """Measurement locations ``X`` (N_s x 2) and observed values ``y``.

    If ``domain=(lx, ly)`` is given, every location must lie in the closed
    rectangle ``[0, lx] x [0, ly]``.
    """

    def __init__(self, locations, values, domain=None):
        loc = np.array(locations, dtype=float, ndmin=2)
        val = np.array(values, dtype=float, ndmin=1)
        if loc.ndim != 2 or loc.shape[1] != 2:
            raise ValueError("locations must have shape (N_s, 2)")
        if loc.shape[0] < 1:
            raise ValueError("an observation set needs at least one point")
        if val.shape != (loc.shape[0],):
            raise ValueError("need exactly one value per location")
        if not (np.all(np.isfinite(loc)) and np.all(np.isfinite(val))):
            raise ValueError("observations must be finite")
        if len(np.unique(loc, axis=0)) != len(loc):
            raise ValueError("duplicate observation locations")
        if domain is not None:
            lx, ly = domain
            inside = (loc >= 0).all(axis=1) & (loc[:, 0] <= lx) & (loc[:, 1] <= ly)
            if not inside.all():
                bad = np.flatnonzero(~inside)
                raise ValueError(f"locations {bad.tolist()} fall outside the domain")
        loc.setflags(write=False)
        val.setflags(write=False)
        self.locations = loc
        self.values = val
        self.domain = domain

    @property
    def n(self) -> int:
        return len(self.values)

    def __len__(self):
        return self.n

    def extend(self, location, value) -> "ObservationSet":
        return ObservationSet(
            np.vstack([self.locations, np.reshape(location, (1, 2))]),
            np.append(self.values, value),
            domain=self.domain,
        )

    def permuted(self, order) -> "ObservationSet":
        order = np.asarray(order)
        return ObservationSet(self.locations[order], self.values[order], self.domain)

    def __repr__(self):
        return f"ObservationSet(n={self.n})"


def kernel_eval(x, x_prime, theta: KernelHyperparams) -> float:
    """``sigma^2 exp(-(dx1/l1)^2 - (dx2/l2)^2)`` for a single pair of points."""
    d1 = (x[0] - x_prime[0]) / theta.l1
    d2 = (x[1] - x_prime[1]) / theta.l2
    return theta.sigma**2 * math.exp(-d1 * d1 - d2 * d2)


def cov_matrix(A, B, theta: KernelHyperparams) -> np.ndarray:
    """Kernel matrix between two point lists, shape ``(len(A), len(B))``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.size == 0 or B.size == 0:
        raise ValueError("cov_matrix needs nonempty point lists")
    # built in place; these matrices reach nodes x nodes
    out = np.subtract.outer(A[:, 0], B[:, 0])
    out *= out
    out *= -1.0 / theta.l1**2
    tmp = np.subtract.outer(A[:, 1], B[:, 1])
    tmp *= tmp
    tmp *= 1.0 / theta.l2**2
    out -= tmp
    del tmp
    np.exp(out, out=out)
    out *= theta.sigma**2
    return out


def factorize(K, scale):
    """Cholesky factor of a symmetric matrix with the escalating jitter policy.

    Returns ``(L, jitter)`` with ``L`` lower triangular and
    ``L L^T = K + jitter I``.
    """
    try:
        return linalg.cholesky(K, lower=True, check_finite=False), 0.0
    except linalg.LinAlgError:
        pass
    eye = np.eye(len(K))
    for rel in JITTER_LADDER:
        jitter = rel * scale
        try:
            return linalg.cholesky(K + jitter * eye, lower=True, check_finite=False), jitter
        except linalg.LinAlgError:
            continue
    raise IllConditionedCovariance(
        f"covariance not positive definite with jitter up to {JITTER_LADDER[-1]:g} sigma^2"
    )


def _obs_factor(obs, theta):
    K = cov_matrix(obs.locations, obs.locations, theta)
    K[np.diag_indices_from(K)] += theta.sigma_eps**2
    return factorize(K, theta.sigma**2)


def log_marginal_likelihood(obs: ObservationSet, theta: KernelHyperparams) -> float:
    L, _ = _obs_factor(obs, theta)
    alpha = linalg.solve_triangular(L, obs.values, lower=True, check_finite=False)
    return float(
        -0.5 * alpha @ alpha
        - np.log(np.diag(L)).sum()
        - 0.5 * obs.n * math.log(2 * math.pi)
    )


@dataclass(frozen=True)
class FitResult:
    theta: KernelHyperparams
    log_likelihood: float
    improved: bool
    n_starts: int


def _pack(theta, fit_noise):
    p = [math.log(theta.sigma), math.log(theta.l1), math.log(theta.l2)]
    if fit_noise:
        p.append(math.log(theta.sigma_eps + NOISE_OFFSET))
    return np.array(p)


def _unpack(p, fit_noise, sigma_eps):
    if fit_noise:
        sigma_eps = max(math.exp(p[3]) - NOISE_OFFSET, 0.0)
    return KernelHyperparams(math.exp(p[0]), math.exp(p[1]), math.exp(p[2]), sigma_eps)


def default_starts(obs: ObservationSet, n_starts=8, seed=0):
    """Log-uniform draws in ``[0.1, 10] x`` data-scale heuristics."""
    y = obs.values
    scale = float(np.std(y)) or float(np.max(np.abs(y))) or 1.0
    span = np.ptp(obs.locations, axis=0)
    span = np.where(span > 0, span, 1.0)
    base = np.array([scale, span[0] / 4, span[1] / 4, 0.1 * scale])
    rng = np.random.default_rng(seed)
    factors = 10.0 ** rng.uniform(-1.0, 1.0, size=(n_starts, 4))
    return [KernelHyperparams(*(base * f)) for f in factors]


def fit_hyperparameters(
    obs: ObservationSet,
    init=None,
    *,
    fit_noise=True,
    n_starts=8,
    seed=0,
    maxiter=2000,
) -> FitResult:
    """Type-II maximum likelihood by multi-start Nelder-Mead in log space.

    ``init`` is a list of starting guesses; ``n_starts`` heuristic starts are
    appended. With ``fit_noise=False`` each start keeps its own ``sigma_eps``.
    The result is never worse than the best supplied start.
    """
    if obs.n < 3:
        raise ValueError("hyperparameter fitting needs at least 3 observations")
    starts = list(init or []) + default_starts(obs, n_starts, seed)
    if not starts:
        raise ValueError("at least one initial guess is required")

    def safe_lml(theta):
        try:
            return log_marginal_likelihood(obs, theta)
        except (IllConditionedCovariance, ValueError, OverflowError):
            return -np.inf

    best_theta, best_lml = None, -np.inf
    start_best = -np.inf
    for start in starts:
        lml0 = safe_lml(start)
        if lml0 > start_best:
            start_best = lml0
        if lml0 > best_lml:
            best_theta, best_lml = start, lml0

        def objective(p, eps=start.sigma_eps):
            try:
                value = safe_lml(_unpack(p, fit_noise, eps))
            except (ValueError, OverflowError):
                return 1e300
            return -value if np.isfinite(value) else 1e300

        res = optimize.minimize(
            objective,
            _pack(start, fit_noise),
            method="Nelder-Mead",
            options={"maxiter": maxiter, "xatol": 1e-6, "fatol": 1e-9},
        )
        if res.fun < 1e300:
            cand = _unpack(res.x, fit_noise, start.sigma_eps)
            lml = -res.fun
            if lml > best_lml:
                best_theta, best_lml = cand, lml

    if best_theta is None:
        raise IllConditionedCovariance("log-marginal likelihood undefined at every start")
    improved = best_lml > start_best + 1e-9 * max(1.0, abs(start_best))
    if not improved:
        warnings.warn("hyperparameter search did not improve on the initial guesses")
    return FitResult(best_theta, float(best_lml), improved, len(starts))


def gp_posterior(obs: ObservationSet, theta: KernelHyperparams, query, full_cov=True):
    """Kriging mean and covariance at ``query`` points.

    Returns ``(mean, cov)``; with ``full_cov=False`` the second element is
    the pointwise variance only.
    """
    query = np.atleast_2d(np.asarray(query, dtype=float))
    L, _ = _obs_factor(obs, theta)
    Kxq = cov_matrix(obs.locations, query, theta)
    alpha = linalg.cho_solve((L, True), obs.values, check_finite=False)
    mean = Kxq.T @ alpha
    V = linalg.solve_triangular(L, Kxq, lower=True, check_finite=False)
    del Kxq
    if not full_cov:
        var = theta.sigma**2 - np.einsum("ij,ij->j", V, V)
        return mean, np.maximum(var, 0.0)
    cov = cov_matrix(query, query, theta)
    cov -= V.T @ V
    # exact symmetry for downstream symmetric eigensolvers
    cov += cov.T
    cov *= 0.5
    return mean, cov
