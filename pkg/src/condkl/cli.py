"""Command-line experiment runner.

``condkl <stage> --config FILE|PRESET [--out DIR] [--seed N] [--threads N]``
runs one pipeline stage (``run`` executes the stages listed in the config).
Outputs are byte-identical for equal config and seed; wall-clock timings go
to ``timings.log`` only.
"""

import argparse
import errno
import json
import os
import sys
import time
import traceback
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .active_learning import METHOD_1, METHOD_2, CampaignError, run_campaign
from .conditioning import (
    ConditionalKLModel,
    condition_then_truncate,
    implied_moment_field,
    induced_eigenvalues,
    truncate_then_condition,
)
from .config import PRESETS, STAGES, ConfigError, load_config
from .grid import StructuredGrid, field_l2_norm
from .kernel_gp import KernelHyperparams, ObservationSet, fit_hyperparameters, log_marginal_likelihood
from .kl_expansion import evaluate_field, separable_kl_basis
from .outputs import OutputWriter, read_table
from .pde_solver import DiffusionProblem
from .rng import derive_seed, substream
from .uq_propagation import collocation_moments, monte_carlo_convergence, smolyak_grid

OUT_ENV = "CONDKL_OUT_DIR"
LOCK_NAME = ".condkl.lock"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_LOCKED = 3
EXIT_IO = 4

# sub-task tags for derive_seed
_FIT_TAG = 21
_MC_TAG = 22
_REF_TAG = 23
_LEARN_TAG = 24


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(str(exc))
        self.stage = stage
        self.exc = exc


class OutputLocked(RuntimeError):
    pass


class Pipeline:
    """Lazily built shared state for the stages of one run."""

    def __init__(self, cfg, writer: OutputWriter, threads=1):
        self.cfg = cfg
        self.out = writer
        self.threads = threads
        self.grid = StructuredGrid(cfg.nx, cfg.ny, cfg.lx, cfg.ly)
        self.problem = DiffusionProblem(self.grid)
        # a zero-amplitude prior only makes sense for synthesis (g_ref = 0)
        self.prior = (KernelHyperparams(cfg.sigma, cfg.l1, cfg.l2, cfg.sigma_eps)
                      if cfg.sigma > 0 else None)
        self._cache = {}
        self.summary = {}

    def _require_prior(self):
        if self.prior is None:
            raise ValueError("kernel.sigma = 0 supports the synth stage only")

    def _cached(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    # reference field and data
    @property
    def reference_basis(self):
        return self._cached("ref_basis", lambda: separable_kl_basis(
            self.grid, self.prior, fraction=self.cfg.reference_fraction))

    @property
    def g_ref(self):
        def build():
            if self.prior is None:
                return np.zeros(self.grid.n)
            basis = self.reference_basis
            xi = substream(self.cfg.reference_seed, 0).standard_normal(basis.d)
            return evaluate_field(basis, xi)
        return self._cached("g_ref", build)

    @property
    def observations(self) -> ObservationSet:
        def build():
            cfg = self.cfg
            domain = (cfg.lx, cfg.ly)
            if cfg.obs_file:
                cols, data = read_table(cfg.obs_file)
                if cols[:3] != ["x1", "x2", "value"]:
                    raise ValueError(f"{cfg.obs_file}: expected columns x1,x2,value")
                return ObservationSet(data[:, :2], data[:, 2], domain=domain)
            rng = substream(cfg.obs_seed, 1)
            X = rng.uniform((0.0, 0.0), domain, size=(cfg.n_obs, 2))
            y = self.grid.interpolate(self.g_ref, X)
            if cfg.sigma_eps > 0:
                y = y + cfg.sigma_eps * rng.standard_normal(cfg.n_obs)
            return ObservationSet(X, y, domain=domain)
        return self._cached("obs", build)

    @property
    def fit(self):
        def build():
            self._require_prior()
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                result = fit_hyperparameters(
                    self.observations, [self.prior], fit_noise=self.cfg.sigma_eps > 0,
                    seed=derive_seed(self.cfg.seed, _FIT_TAG))
            return result, [str(w.message) for w in caught]
        return self._cached("fit", build)

    @property
    def theta(self) -> KernelHyperparams:
        self._require_prior()
        return self.fit[0].theta if self.cfg.fit_kernel else self.prior

    # models
    def approach1(self, d_c=None):
        return self._cached(("a1", d_c), lambda: condition_then_truncate(
            self.observations, self.theta, self.grid, d_c, fraction=self.cfg.fraction))

    def approach2(self):
        return self._cached("a2", lambda: truncate_then_condition(
            self.observations, self.theta, self.grid, self.cfg.d, fraction=self.cfg.fraction))

    def unconditional(self):
        def build():
            basis = separable_kl_basis(self.grid, self.theta, fraction=self.cfg.fraction)
            return ConditionalKLModel.from_basis(basis)
        return self._cached("uncond", build)

    def configured_model(self):
        cfg = self.cfg
        if cfg.approach == "1":
            model = self.approach1(cfg.r) if cfg.r else self.approach1()
        elif cfg.approach == "2":
            model = self.approach2()
        else:
            model = self.unconditional()
        if cfg.r and model.r > cfg.r:
            model = model.truncated(cfg.r)
        return model

    def propagate(self, model, seed_key):
        """(g moments, u moments, extra summary) by the configured method."""
        cfg = self.cfg
        if cfg.propagation == "mc":
            rows, mg, mu = monte_carlo_convergence(
                model, self.problem, cfg.mc_samples, derive_seed(cfg.seed, _MC_TAG, seed_key),
                self.threads)
            return mg, mu, {"method": "mc", "samples": cfg.mc_samples, "convergence": rows}
        rule = smolyak_grid(model.r, cfg.level)
        mg, mu = collocation_moments(model, self.problem, rule, self.threads)
        return mg, mu, {"method": "collocation", "level": cfg.level, "nodes_solved": len(rule),
                        "clipped_g": mg.n_clipped, "clipped_u": mu.n_clipped}


def _norm(grid, f):
    return field_l2_norm(f, grid)


def stage_synth(p: Pipeline):
    g = p.g_ref
    obs = p.observations
    p.out.field("g_ref.csv", p.grid, g)
    p.out.field("k_ref.csv", p.grid, np.exp(g))
    p.out.table("observations.csv", ("x1", "x2", "value"),
                np.column_stack([obs.locations, obs.values]))
    if p.prior is None:
        d_ref, retained = 0, 1.0
    else:
        basis = p.reference_basis
        d_ref, retained = basis.d, float(basis.eigenvalues.sum() / basis.total_variance)
    return {
        "d_reference": d_ref,
        "retained_variance": retained,
        "n_observations": obs.n,
        "g_ref_mean": float(g.mean()),
        "g_ref_std": float(g.std()),
    }


def stage_fit(p: Pipeline):
    result, notes = p.fit
    return {
        "prior": p.prior.as_dict(),
        "prior_log_likelihood": log_marginal_likelihood(p.observations, p.prior),
        "fitted": result.theta.as_dict(),
        "log_likelihood": result.log_likelihood,
        "improved": result.improved,
        "starts": result.n_starts,
        "warnings": notes,
        "used_downstream": p.cfg.fit_kernel,
    }


def stage_condition(p: Pipeline):
    grid = p.grid
    a1, a2, un = p.approach1(), p.approach2(), p.unconditional()
    out = {"d_c": a1.r, "d": a2.info["d"], "r": a2.r, "d_unconditional": un.r}
    for tag, model in (("unconditional", un), ("approach1", a1), ("approach2", a2)):
        m = implied_moment_field(model)
        p.out.field(f"g_mean_{tag}.csv", grid, m.mean, model=tag, dimension=model.r)
        p.out.field(f"g_std_{tag}.csv", grid, m.std, model=tag, dimension=model.r)
        out[f"norm_g_mean_{tag}"] = _norm(grid, m.mean)
        out[f"norm_g_std_{tag}"] = _norm(grid, m.std)
    lam_u = un.info["eigenvalues"]
    lam_1 = a1.info["eigenvalues"]
    lam_2 = induced_eigenvalues(a2)
    k = max(len(lam_u), len(lam_1), len(lam_2))
    pad = lambda v: np.concatenate([v, np.full(k - len(v), np.nan)])
    p.out.table("eigenvalues.csv", ("index", "unconditional", "approach1", "approach2"),
                zip(range(1, k + 1), pad(lam_u), pad(lam_1), pad(lam_2)))
    return out


def stage_propagate(p: Pipeline):
    model = p.configured_model()
    mg, mu, extra = p.propagate(model, 0)
    grid = p.grid
    for name, f in (("g_mean", mg.mean), ("g_std", mg.std), ("u_mean", mu.mean), ("u_std", mu.std)):
        p.out.field(f"propagate_{name}.csv", grid, f, approach=model.approach, dimension=model.r)
    rows = extra.pop("convergence", None)
    if rows is not None:
        p.out.table("mc_convergence.csv",
                    ("samples", "norm_u_mean", "norm_u_std", "norm_g_mean", "norm_g_std"), rows)
    extra.update({
        "approach": model.approach, "r": model.r,
        "norm_g_mean": _norm(grid, mg.mean), "norm_g_std": _norm(grid, mg.std),
        "norm_u_mean": _norm(grid, mu.mean), "norm_u_std": _norm(grid, mu.std),
    })
    return extra


def stage_compare(p: Pipeline):
    """Both approaches at equal dimension against the full Approach-1 model."""
    grid, cfg = p.grid, p.cfg
    ref = p.approach1()
    a2 = p.approach2()
    r = a2.r
    a1 = ref.truncated(min(r, ref.r))
    ref_g = implied_moment_field(ref)
    out = {"d": a2.info["d"], "d_c": ref.r, "r": r}
    # reference u moments by MC on the full model, always
    saved = cfg
    p.cfg = cfg.replace(propagation="mc")
    try:
        _, ref_u, _ = p.propagate(ref, _REF_TAG)
    finally:
        p.cfg = saved
    for tag, model in (("approach1", a1), ("approach2", a2)):
        mgc = implied_moment_field(model)
        _, mu, extra = p.propagate(model, 1 if tag == "approach1" else 2)
        errs = {
            "g_mean": _norm(grid, mgc.mean - ref_g.mean),
            "g_std": _norm(grid, mgc.std - ref_g.std),
            "u_mean": _norm(grid, mu.mean - ref_u.mean),
            "u_std": _norm(grid, mu.std - ref_u.std),
        }
        p.out.field(f"compare_g_std_error_{tag}.csv", grid, mgc.std - ref_g.std)
        p.out.field(f"compare_u_std_{tag}.csv", grid, mu.std)
        extra.pop("convergence", None)
        out[tag] = {"dimension": model.r, "errors": errs, "propagation": extra}
    p.out.field("compare_u_std_reference.csv", grid, ref_u.std)
    out["approach1_more_accurate_g_std"] = (out["approach1"]["errors"]["g_std"]
                                            < out["approach2"]["errors"]["g_std"])
    return out


def stage_learn(p: Pipeline):
    cfg = p.cfg
    out = {}
    methods = {"1": METHOD_1, "2": METHOD_2}
    for key in cfg.al_methods:
        method = methods[key]
        try:
            camp = run_campaign(
                p.g_ref, p.observations, p.theta, method, cfg.n_am, p.problem,
                mc_samples=cfg.al_mc_samples, ensemble_size=cfg.ensemble, fraction=cfg.fraction,
                seed=derive_seed(cfg.seed, _LEARN_TAG), threads=p.threads,
                keep_criteria=cfg.dump_criteria)
        except CampaignError as exc:
            _write_campaign(p, method, exc.campaign)
            raise
        out[method] = _write_campaign(p, method, camp)
    if len(out) == 2:
        last = [r for r in out[METHOD_1]["steps"] if r["step"] >= max(1, cfg.n_am - 2)]
        last2 = [r for r in out[METHOD_2]["steps"] if r["step"] >= max(1, cfg.n_am - 2)]
        out["final_norm_g"] = {m: out[m]["steps"][-1]["norm_g"] for m in (METHOD_1, METHOD_2)}
        out["tail_norm_u"] = {METHOD_1: sum(r["norm_u"] for r in last),
                              METHOD_2: sum(r["norm_u"] for r in last2)}
    return out


def _write_campaign(p, method, camp):
    cols = ("step", "x1", "x2", "norm_g", "norm_u", "d_c",
            "criterion_min", "criterion_max", "criterion_bound")
    rows = [(r.step, r.x1, r.x2, r.norm_g, r.norm_u, r.d_c, r.criterion_min, r.criterion_max,
             r.criterion_bound) for r in camp.records]
    p.out.table(f"campaign_{method}.csv", cols, rows, method=method)
    for i, crit in enumerate(camp.criteria, 1):
        p.out.field(f"criterion_{method}_step{i:02d}.csv", p.grid, crit, method=method, step=i)
    violations = sum(
        1 for r in camp.records
        if r.step > 0 and method == METHOD_2
        and not (r.criterion_min >= 0 and r.criterion_max <= r.criterion_bound)
    )
    return {"steps": [dict(zip(cols, row)) for row in rows], "bound_violations": violations}


STAGE_FUNCS = {
    "synth": stage_synth,
    "fit": stage_fit,
    "condition": stage_condition,
    "propagate": stage_propagate,
    "compare": stage_compare,
    "learn": stage_learn,
}


class _Lock:
    def __init__(self, directory):
        self.path = Path(directory) / LOCK_NAME

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise OutputLocked(f"output directory in use (remove {self.path} if stale)") from exc
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


def execute(cfg, stages, out_dir, threads=1):
    """Run ``stages`` and write outputs; returns the summary dict."""
    timings = []
    with _Lock(out_dir):
        writer = OutputWriter(out_dir, cfg.digest(), cfg.seed)
        pipe = Pipeline(cfg, writer, threads)
        results = {}
        for stage in stages:
            t0 = time.perf_counter()
            try:
                results[stage] = STAGE_FUNCS[stage](pipe)
            except Exception as exc:
                raise StageError(stage, exc) from exc
            timings.append((stage, time.perf_counter() - t0))
        summary = {
            "version": __version__,
            "config": cfg.to_dict(),
            "config_hash": cfg.digest(),
            "seed": cfg.seed,
            "seeds": {"reference": cfg.reference_seed, "observations": cfg.obs_seed,
                      "master": cfg.seed},
            "theta": pipe.theta.as_dict() if pipe.prior is not None else None,
            "stages": list(stages),
            "results": results,
        }
        name = "summary.json" if len(stages) > 1 else f"{stages[0]}.json"
        writer.json(name, summary)
        with open(Path(out_dir) / "timings.log", "a") as fh:
            for stage, dt in timings:
                fh.write(f"{stage}\t{dt:.3f}s\tthreads={threads}\n")
    return summary


def _module_of(exc):
    tb = exc.__traceback__
    module = None
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("condkl.") and name != "condkl.cli":
            module = name.split(".", 1)[1]
        tb = tb.tb_next
    return module


def _fail(code, kind, message, **extra):
    payload = {"status": "error", "exit_code": code, "error": kind, "message": message}
    payload.update(extra)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def build_parser():
    parser = argparse.ArgumentParser(prog="condkl", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("run",):
        sp = sub.add_parser(name, help="all configured stages" if name == "run" else f"{name} stage")
        sp.add_argument("--config", required=True,
                        help=f"config file or preset ({', '.join(PRESETS)})")
        sp.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and config)")
        sp.add_argument("--seed", type=int, help="master seed (overrides config)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads; never changes results")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be nonnegative")
            cfg = cfg.replace(seed=args.seed)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), line=exc.line)
    if args.threads < 1:
        return _fail(EXIT_CONFIG, "usage", "--threads must be at least 1")
    out_dir = args.out or os.environ.get(OUT_ENV) or cfg.out_dir
    stages = list(cfg.stages) if args.command == "run" else [args.command]
    try:
        summary = execute(cfg, stages, out_dir, args.threads)
    except OutputLocked as exc:
        return _fail(EXIT_LOCKED, "locked", str(exc), out=str(out_dir))
    except StageError as exc:
        inner = exc.exc
        if isinstance(inner, OSError) and inner.errno in (errno.EACCES, errno.ENOSPC, errno.EROFS, errno.ENOENT):
            return _fail(EXIT_IO, "io", str(inner), stage=exc.stage)
        return _fail(EXIT_FAILURE, type(inner).__name__, str(inner), stage=exc.stage,
                     module=_module_of(inner) or "cli",
                     trace=traceback.format_exception_only(type(inner), inner)[-1].strip())
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    print(json.dumps({"status": "ok", "out": str(out_dir), "stages": stages,
                      "config_hash": summary["config_hash"]}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
