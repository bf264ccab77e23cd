"""Standard errors: the Rathbun asymptotic covariance and the parametric bootstrap."""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .catalog import EventCatalog, ObservationDomain
from .fit_em import FitResult, em_fit, fd_steps, intensity_jacobian
from .intensity import EtasPowerLaw, IntensityModel
from .simulate import SimConfig, simulate


class SingularInformationError(np.linalg.LinAlgError):
    """The information matrix has a (numerically) null direction."""

    def __init__(self, direction: np.ndarray, names: Sequence[str]):
        terms = ", ".join(f"{v:+.3g}*{n}" for v, n in zip(direction, names) if abs(v) > 1e-3)
        super().__init__(f"singular information matrix; null direction {terms}")
        self.direction = direction


class BootstrapError(RuntimeError):
    pass


@dataclass
class CovarianceEstimate:
    sigma_hat: np.ndarray
    param_names: tuple[str, ...]
    theta: np.ndarray
    gradient_method: str
    steps: np.ndarray | None = None

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sigma_hat), 0.0, None))

    def wald_intervals(self, level: float = 0.95) -> np.ndarray:
        from scipy.stats import norm
        z = norm.ppf(0.5 + level / 2)
        se = self.standard_errors
        return np.column_stack([self.theta - z * se, self.theta + z * se])


def default_free_params(model: IntensityModel, catalog: EventCatalog) -> list[str]:
    names = list(model.param_names)
    unmarked = catalog.mark is None or not np.any(np.isfinite(catalog.mark))
    if isinstance(model.triggering, EtasPowerLaw) and unmarked:
        names.remove("alpha")
    return names


def asymptotic_covariance(model: IntensityModel, catalog: EventCatalog, *,
                          analytic: bool = True, steps=None,
                          free: Sequence[str] | None = None,
                          rel_tol: float = 1e-12) -> CovarianceEstimate:
    """Inverse of sum_i grad(lambda_i) grad(lambda_i)^T / lambda_i^2.

    Gradients are analytic for constant or grid backgrounds with
    Gaussian-exponential triggering, and central differences with steps
    max(1e-5 |theta_k|, 1e-7) otherwise.  ``free`` restricts the
    parameters (by name); by default every parameter is used except the
    magnitude sensitivity of an unmarked ETAS model, which the data
    cannot inform.
    """
    names = list(model.param_names)
    free = default_free_params(model, catalog) if free is None else list(free)
    cols = [names.index(n) for n in free]
    lam, jac, how = intensity_jacobian(model, catalog, analytic=analytic, steps=steps)
    if np.any(lam <= 0):
        raise ValueError("intensity must be positive at every event")
    jac = jac[:, cols]
    scaled = jac / lam[:, None]
    info = scaled.T @ scaled
    info = 0.5 * (info + info.T)
    w, v = np.linalg.eigh(info)
    if w.size and (w[0] <= rel_tol * max(w[-1], 0.0) or w[-1] <= 0):
        raise SingularInformationError(v[:, 0], free)
    sigma = (v / w) @ v.T
    sigma = 0.5 * (sigma + sigma.T)
    theta = model.params()[cols]
    used = None if how == "analytic" else (fd_steps(model.params()) if steps is None else np.asarray(steps))
    return CovarianceEstimate(sigma, tuple(free), theta, how, None if used is None else used[cols])


def gradient_stencil_check(model: IntensityModel, catalog: EventCatalog,
                           free: Sequence[str] | None = None) -> float:
    """Largest gap between three- and five-point gradients of lambda.

    Each parameter's gap is relative to the largest magnitude of its
    gradient column, so entries at roundoff level do not dominate.
    Parameters are those :func:`asymptotic_covariance` would use.
    """
    names = list(model.param_names)
    free = default_free_params(model, catalog) if free is None else list(free)
    cols = [names.index(n) for n in free]
    _, j3, _ = intensity_jacobian(model, catalog, analytic=False, stencil=3)
    _, j5, _ = intensity_jacobian(model, catalog, analytic=False, stencil=5)
    j3, j5 = j3[:, cols], j5[:, cols]
    scale = np.maximum(np.max(np.abs(j5), axis=0), 1e-300)
    return float(np.max(np.max(np.abs(j3 - j5), axis=0) / scale))


@dataclass
class BootstrapResult:
    replicates: np.ndarray
    intervals: np.ndarray
    B: int
    failures: int
    param_names: tuple[str, ...]
    stopped_early: bool = False
    seeds: list[int] = field(default_factory=list)

    @property
    def sd(self) -> np.ndarray:
        return np.std(self.replicates, axis=0, ddof=1)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replicate", *self.param_names])
            for i, row in enumerate(self.replicates):
                w.writerow([i, *(f"{v:.12g}" for v in row)])


def percentile_intervals(replicates: np.ndarray, level: float = 0.95) -> np.ndarray:
    """Per-column (lower, upper) empirical quantiles; order-independent."""
    reps = np.sort(np.asarray(replicates, float), axis=0)
    a = (1 - level) / 2
    return np.quantile(reps, [a, 1 - a], axis=0, method="inverted_cdf").T


def _default_fit(model: IntensityModel, domain: ObservationDomain, fit_kwargs: dict):
    def fit(catalog):
        return em_fit(model.triggering, model.background, catalog, domain,
                      max_lag=model.max_lag, **fit_kwargs)
    return fit


def _replicate(args):
    model, domain, seed, sim_config, fit_fn, fit_kwargs, names = args
    cfg = SimConfig(seed=seed, pad_time=sim_config.pad_time, pad_space=sim_config.pad_space,
                    method=sim_config.method, mark_beta=sim_config.mark_beta)
    cat = simulate(model, domain, cfg).catalog
    fit = fit_fn or _default_fit(model, domain, fit_kwargs)
    try:
        res: FitResult = fit(cat)
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        return None, f"{type(exc).__name__}: {exc}"
    if not res.converged:
        return None, res.message
    row = res.model.params()
    idx = [list(res.model.param_names).index(n) for n in names]
    return row[idx], ""


def parametric_bootstrap(model: IntensityModel, domain: ObservationDomain, B: int = 1000,
                         seed: int = 0, *, fit: Callable[[EventCatalog], FitResult] | None = None,
                         fit_kwargs: dict | None = None, sim_config: SimConfig | None = None,
                         free: Sequence[str] | None = None, level: float = 0.95,
                         adaptive: bool = False, block: int = 100, rel_change: float = 0.01,
                         max_failure_rate: float = 0.2, workers: int = 1) -> BootstrapResult:
    """Simulate from the fitted model, refit, and take percentile intervals.

    Replicate seeds are spawned from ``seed`` so results do not depend on
    the execution order or on ``workers``.  Replicates are simulated on
    the unpadded window by default, which is the process the exact
    likelihood describes; pass ``sim_config`` to change that.  With
    ``adaptive`` the run stops once every interval endpoint moves by less
    than ``rel_change`` (relative) between consecutive blocks.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    names = list(model.param_names) if free is None else list(free)
    sim_config = sim_config or SimConfig(pad_time=0.0, pad_space=0.0, method="cluster")
    seeds = [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(B)]
    kw = dict(fit_kwargs or {})
    jobs = [(model, domain, s, sim_config, fit, kw, names) for s in seeds]
    rows: list[np.ndarray | None] = []
    reasons: list[str] = []
    prev = None
    stopped = False
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for start in range(0, B, block):
            chunk = jobs[start:start + block]
            out = list(pool.map(_replicate, chunk)) if pool else [_replicate(j) for j in chunk]
            for row, why in out:
                rows.append(row)
                if row is None:
                    reasons.append(why)
            good = [r for r in rows if r is not None]
            if adaptive and len(good) >= 2 and start + block < B:
                cur = percentile_intervals(np.array(good), level)
                if prev is not None:
                    denom = np.maximum(np.abs(prev), 1e-300)
                    if np.all(np.abs(cur - prev) / denom < rel_change):
                        stopped = True
                        break
                prev = cur
    finally:
        if pool:
            pool.shutdown()
    done = len(rows)
    failures = sum(r is None for r in rows)
    if failures > max_failure_rate * done:
        sample = "; ".join(sorted(set(reasons))[:3])
        raise BootstrapError(f"{failures} of {done} replicates failed ({sample})")
    good = np.array([r for r in rows if r is not None])
    return BootstrapResult(good, percentile_intervals(good, level), done, failures,
                           tuple(names), stopped, seeds[:done])
