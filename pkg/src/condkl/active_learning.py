"""Greedy selection of new measurement locations for the log-coefficient.

Method 1 samples where the kriging variance of ``g`` is largest. Method 2
treats ``(g, u)`` as jointly Gaussian, estimates their covariances from an
ensemble of conditional realizations, and picks the location whose
(approximate) conditioning most reduces the integrated variance of ``u``.
"""

from dataclasses import dataclass, field

import numpy as np

from .conditioning import condition_then_truncate, implied_moment_field
from .grid import field_l2_norm
from .kernel_gp import KernelHyperparams, ObservationSet, gp_posterior
from .pde_solver import DiffusionProblem
from .rng import derive_seed, standard_normals
from .uq_propagation import ordered_map, solve_batch, monte_carlo_moments

METHOD_1 = "method-1"
METHOD_2 = "method-2"
SKIP_TOL = 1e-10
NODE_MERGE_TOL = 1e-12

ENSEMBLE_STREAM = 1
_NORM_TAG = 11
_ENSEMBLE_TAG = 12
_NOISE_TAG = 13


class CampaignError(RuntimeError):
    """An acquisition campaign stopped early; ``campaign`` keeps the steps done."""

    def __init__(self, message, campaign):
        super().__init__(message)
        self.campaign = campaign


@dataclass(frozen=True, eq=False)
class AcquisitionResult:
    location: np.ndarray
    index: int
    criterion: np.ndarray
    method: str
    bound: float = np.nan


def acquire_method1(obs: ObservationSet, theta: KernelHyperparams, candidates) -> AcquisitionResult:
    """Candidate with the largest conditional variance of ``g``.

    ``index`` refers to the candidate list; ties go to the lowest index.
    """
    cand = np.atleast_2d(np.asarray(candidates, dtype=float))
    if len(cand) == 0:
        raise ValueError("no candidates")
    _, var = gp_posterior(obs, theta, cand, full_cov=False)
    best = int(np.argmax(var))
    return AcquisitionResult(cand[best].copy(), best, var, METHOD_1)


@dataclass(frozen=True, eq=False)
class CrossCovariance:
    """Sample (co)variances of two ensembles in centred-factor form.

    ``g_factor`` and ``u_factor`` are ``(M, n)`` centred ensembles divided
    by ``sqrt(M - 1)``, so ``cov_ug = u_factor.T @ g_factor``.
    """

    var_g: np.ndarray
    var_u: np.ndarray
    g_factor: np.ndarray
    u_factor: np.ndarray

    def cov_ug(self, rows=None, cols=None) -> np.ndarray:
        u = self.u_factor if rows is None else self.u_factor[:, rows]
        g = self.g_factor if cols is None else self.g_factor[:, cols]
        return u.T @ g

    def column(self, j) -> np.ndarray:
        return self.u_factor.T @ self.g_factor[:, j]


def sample_cross_covariances(g_ensemble, u_ensemble) -> CrossCovariance:
    """Unbiased sample covariances from ensembles of shape ``(M, n)``."""
    g = np.asarray(g_ensemble, dtype=float)
    u = np.asarray(u_ensemble, dtype=float)
    if g.shape != u.shape or g.ndim != 2:
        raise ValueError("ensembles must share shape (M, n)")
    m = g.shape[0]
    if m < 2:
        raise ValueError("need at least 2 ensemble members")
    scale = 1.0 / np.sqrt(m - 1)
    gf = (g - g.mean(axis=0)) * scale
    uf = (u - u.mean(axis=0)) * scale
    return CrossCovariance(
        np.einsum("ij,ij->j", gf, gf), np.einsum("ij,ij->j", uf, uf), gf, uf
    )


def method2_criterion(cross: CrossCovariance, weights, candidates, sigma):
    """Integrated approximate posterior variance of ``u`` per candidate node.

    ``J(x') = sum_x w(x) [var_u(x) - cov_ug(x, x')^2 / var_g(x')]``.
    Candidates with ``var_g(x') <= 1e-10 sigma^2`` get ``nan``.

    Returns
    -------
    J : array, one entry per candidate
    bound : float
        ``sum_x w(x) var_u(x)``, the value of J without conditioning.
    """
    w = np.asarray(weights, dtype=float)
    cand = np.asarray(candidates, dtype=int)
    bound = float(w @ cross.var_u)
    # sum_x w cov_ug(x, x')^2 = g'^T (U W U^T) g' for the centred factors
    S = (cross.u_factor * w) @ cross.u_factor.T
    gc = cross.g_factor[:, cand]
    reduction = np.einsum("mj,mk,kj->j", gc, S, gc)
    var_g = cross.var_g[cand]
    ok = var_g > SKIP_TOL * sigma**2
    J = np.full(len(cand), np.nan)
    J[ok] = bound - reduction[ok] / var_g[ok]
    return J, bound


def draw_ensemble(model, problem, M, seed, threads=1):
    """``M`` realizations of ``g`` and the matching solutions, each ``(M, n)``."""
    zetas = standard_normals(seed, ENSEMBLE_STREAM, 0, M, model.r)
    starts = list(range(0, M, 64))
    parts = list(ordered_map(lambda s: solve_batch(model, problem, zetas[s:s + 64], s), starts, threads))
    return np.vstack([p[0] for p in parts]), np.vstack([p[1] for p in parts])


def acquire_method2(obs, theta: KernelHyperparams, model, problem: DiffusionProblem,
                    M=200, seed=0, candidates=None, threads=1) -> AcquisitionResult:
    """Candidate node minimizing the ensemble estimate of integrated ``var(u)``.

    ``candidates`` are node indices of ``model.grid`` (default: all nodes);
    ``index`` in the result refers to that list.
    """
    if M < 2:
        raise ValueError("ensemble size must be at least 2")
    grid = model.grid
    cand = np.arange(grid.n) if candidates is None else np.asarray(candidates, dtype=int)
    if len(cand) == 0:
        raise ValueError("no candidates")
    g_ens, u_ens = draw_ensemble(model, problem, M, seed, threads)
    cross = sample_cross_covariances(g_ens, u_ens)
    J, bound = method2_criterion(cross, grid.weights, cand, theta.sigma)
    if np.all(np.isnan(J)):
        raise ValueError("every candidate has vanishing ensemble variance")
    best = int(np.nanargmin(J))
    return AcquisitionResult(grid.points[cand[best]].copy(), best, J, METHOD_2, bound)


@dataclass
class StepRecord:
    step: int
    x1: float
    x2: float
    norm_g: float
    norm_u: float
    d_c: int
    criterion_min: float = np.nan
    criterion_max: float = np.nan
    criterion_bound: float = np.nan


@dataclass
class Campaign:
    method: str
    g_ref: np.ndarray
    initial: ObservationSet
    records: list = field(default_factory=list)
    observations: ObservationSet = None
    criteria: list = field(default_factory=list)

    def table(self):
        return [(r.step, r.x1, r.x2, r.norm_g, r.norm_u) for r in self.records]


def _observed_nodes(grid, obs):
    hit = np.linalg.norm(grid.points[grid.nearest_node(obs.locations)] - obs.locations, axis=1)
    return set(grid.nearest_node(obs.locations)[hit <= NODE_MERGE_TOL].tolist())


def run_campaign(g_ref, obs: ObservationSet, theta: KernelHyperparams, method: str, n_am: int,
                 problem: DiffusionProblem, *, mc_samples=1000, ensemble_size=200,
                 fraction=0.99, seed=0, threads=1, noise=0.0, keep_criteria=False) -> Campaign:
    """Sequentially acquire ``n_am`` measurements from a reference field.

    After every acquisition the Approach-1 model is rebuilt at ``fraction``
    retained variance and the L2 norms of the ``g`` std (closed form) and of
    the ``u`` std (Monte Carlo, ``mc_samples``) are recorded. Step 0 holds
    the norms before any acquisition. MC seeds depend on the step only, so
    campaigns run with different methods share random numbers.
    """
    if method not in (METHOD_1, METHOD_2):
        raise ValueError(f"unknown method {method!r}")
    if n_am < 1:
        raise ValueError("n_am must be at least 1")
    grid = problem.grid
    g_ref = np.asarray(g_ref, dtype=float)
    campaign = Campaign(method, g_ref, obs, observations=obs)
    taken = _observed_nodes(grid, obs)

    def evaluate(current, step, location, acq):
        model = condition_then_truncate(current, theta, grid, fraction=fraction)
        norm_g = field_l2_norm(implied_moment_field(model).std, grid)
        _, mu = monte_carlo_moments(model, problem, mc_samples,
                                    derive_seed(seed, _NORM_TAG, step), threads)
        rec = StepRecord(step, float(location[0]), float(location[1]), norm_g,
                         field_l2_norm(mu.std, grid), model.r)
        if acq is not None and acq.method == METHOD_2:
            rec.criterion_min = float(np.nanmin(acq.criterion))
            rec.criterion_max = float(np.nanmax(acq.criterion))
            rec.criterion_bound = acq.bound
        campaign.records.append(rec)
        return model

    current = obs
    try:
        model = evaluate(current, 0, (np.nan, np.nan), None)
        for step in range(1, n_am + 1):
            cand = np.array([p for p in range(grid.n) if p not in taken])
            if method == METHOD_1:
                acq = acquire_method1(current, theta, grid.points[cand])
            else:
                acq = acquire_method2(current, theta, model, problem, ensemble_size,
                                      derive_seed(seed, _ENSEMBLE_TAG, step), cand, threads)
            node = int(cand[acq.index])
            if keep_criteria:
                crit = np.full(grid.n, np.nan)
                crit[cand] = acq.criterion
                campaign.criteria.append(crit)
            value = float(g_ref[node])
            if noise > 0:
                rng = np.random.default_rng(derive_seed(seed, _NOISE_TAG, step))
                value += noise * rng.standard_normal()
            current = current.extend(grid.points[node], value)
            taken.add(node)
            campaign.observations = current
            model = evaluate(current, step, grid.points[node], acq)
    except Exception as exc:
        raise CampaignError(f"campaign stopped at step {len(campaign.records)}: {exc}",
                            campaign) from exc
    return campaign
