"""Comparing amortized posteriors with the MCMC reference.

Per test measurement and kinetic parameter, each posterior marginal is
summarized by a fitted Gaussian.  Reported metrics are the mean relative
error of the fitted means and stds and the mean KL(MCMC || DL).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import curve_fit

from .kinetics import PARAM_NAMES

METHODS = ("cvae-vanilla", "cvae-dual-encoder", "cvae-dual-decoder")
MAX_BINS = 2000


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class MarginalFit:
    mu: float
    sigma: float
    fallback: bool = False  # moment estimate used instead of the curve fit


def _gauss_pdf(x, mu, sigma):
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (np.sqrt(2 * np.pi) * sigma)


def fit_gaussian(samples) -> MarginalFit:
    """Least-squares Gaussian density fit to a Freedman-Diaconis histogram."""
    s = np.asarray(samples, dtype=float).ravel()
    if s.size < 2:
        raise EvaluationError("need at least two samples")
    m, sd = float(s.mean()), float(s.std(ddof=1))
    if not sd > 0 or not np.isfinite(sd):
        raise EvaluationError("degenerate (zero-variance) samples")
    edges = np.histogram_bin_edges(s, bins="fd")
    if edges.size - 1 > MAX_BINS or edges.size < 4:
        edges = np.linspace(s.min(), s.max(), min(MAX_BINS, max(3, int(np.sqrt(s.size)))) + 1)
    dens, edges = np.histogram(s, bins=edges, density=True)
    centers = 0.5 * (edges[1:] + edges[:-1])
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            (mu, sigma), _ = curve_fit(_gauss_pdf, centers, dens, p0=(m, sd), maxfev=2000)
        sigma = abs(float(sigma))
        if not (np.isfinite(mu) and np.isfinite(sigma) and sigma > 0):
            raise RuntimeError("non-finite fit")
        return MarginalFit(float(mu), sigma)
    except (RuntimeError, ValueError):
        return MarginalFit(m, sd, fallback=True)


def fit_marginals(draws: np.ndarray) -> list[MarginalFit]:
    draws = np.asarray(draws, dtype=float)
    return [fit_gaussian(draws[:, j]) for j in range(draws.shape[1])]


def gaussian_kl(p: MarginalFit, q: MarginalFit) -> float:
    """KL(N(p) || N(q))."""
    return float(np.log(q.sigma / p.sigma) + (p.sigma**2 + (p.mu - q.mu) ** 2) / (2 * q.sigma**2) - 0.5)


def histogram_kl(p_samples, q_samples, bins: int | str = "fd", floor: float = 1e-10) -> float:
    """Plug-in KL(p || q) on a shared histogram; if q misses bins that p uses, q gets a small floor."""
    p_samples = np.asarray(p_samples, dtype=float).ravel()
    q_samples = np.asarray(q_samples, dtype=float).ravel()
    edges = np.histogram_bin_edges(np.concatenate([p_samples, q_samples]), bins=bins)
    if edges.size - 1 > MAX_BINS:
        edges = np.linspace(edges[0], edges[-1], MAX_BINS + 1)
    p, _ = np.histogram(p_samples, bins=edges)
    q, _ = np.histogram(q_samples, bins=edges)
    p = p / p.sum()
    q = q / q.sum()
    mask = p > 0
    if np.any(mask & (q == 0)):
        q = np.maximum(q, floor)
        q /= q.sum()
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def relative_stat_errors(mcmc_fits: Sequence[Sequence[MarginalFit]], dl_fits: Sequence[Sequence[MarginalFit]]):
    """Mean |mu_mcmc - mu_dl| / mu_mcmc and the same for sigma, per parameter.

    Both arguments are indexed [measurement][parameter].
    """
    if len(mcmc_fits) != len(dl_fits) or not mcmc_fits:
        raise EvaluationError("need matched, non-empty lists of fits")
    mu_m = np.array([[f.mu for f in row] for row in mcmc_fits])
    mu_d = np.array([[f.mu for f in row] for row in dl_fits])
    sd_m = np.array([[f.sigma for f in row] for row in mcmc_fits])
    sd_d = np.array([[f.sigma for f in row] for row in dl_fits])
    zero = np.argwhere(mu_m == 0)
    if zero.size:
        raise EvaluationError(f"MCMC mean is zero at measurement {zero[0][0]}, parameter {zero[0][1]}")
    d_mu = np.mean(np.abs(mu_m - mu_d) / mu_m, axis=0)
    d_sigma = np.mean(np.abs(sd_m - sd_d) / sd_m, axis=0)
    return d_mu, d_sigma


def per_sample_kl(mcmc_sets: Sequence[np.ndarray], dl_sets: Sequence[np.ndarray], estimator: str = "gaussian",
                  mcmc_fits=None, dl_fits=None) -> np.ndarray:
    """(M, P) matrix of marginal KL(MCMC || DL)."""
    if len(mcmc_sets) != len(dl_sets):
        raise EvaluationError("need matched sample sets")
    out = []
    for m, (a, b) in enumerate(zip(mcmc_sets, dl_sets)):
        a = np.asarray(a)[:, :3]
        b = np.asarray(b)[:, :3]
        if estimator == "gaussian":
            fa = mcmc_fits[m] if mcmc_fits is not None else fit_marginals(a)
            fb = dl_fits[m] if dl_fits is not None else fit_marginals(b)
            out.append([gaussian_kl(p, q) for p, q in zip(fa, fb)])
        elif estimator == "histogram":
            out.append([histogram_kl(a[:, j], b[:, j]) for j in range(a.shape[1])])
        else:
            raise EvaluationError(f"unknown KL estimator {estimator!r}")
    return np.array(out)


def average_kl(mcmc_sets, dl_sets, estimator: str = "gaussian") -> np.ndarray:
    """Mean over measurements of the per-parameter marginal KL(MCMC || DL)."""
    return per_sample_kl(mcmc_sets, dl_sets, estimator).mean(axis=0)


@dataclass
class MethodMetrics:
    delta_mu: np.ndarray
    delta_sigma: np.ndarray
    kl: np.ndarray
    kl_std: np.ndarray  # std of the per-sample KL across measurements

    def to_dict(self) -> dict:
        return {k: dict(zip(PARAM_NAMES, np.asarray(getattr(self, k)).tolist()))
                for k in ("delta_mu", "delta_sigma", "kl", "kl_std")}


@dataclass
class EvalReport:
    methods: dict[str, MethodMetrics]
    n_measurements: int
    setting_id: int = 1
    estimator: str = "gaussian"
    fallback_fits: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "M": self.n_measurements,
            "prior_setting": self.setting_id,
            "kl_estimator": self.estimator,
            "fallback_fits": self.fallback_fits,
            "methods": {k: v.to_dict() for k, v in self.methods.items()},
            **self.meta,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        """One row per metric and parameter, one column per method."""
        methods = list(self.methods)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "setting", "parameter", *methods])
            for metric in ("delta_mu", "delta_sigma", "kl"):
                for j, name in enumerate(PARAM_NAMES):
                    w.writerow([metric, self.setting_id, name,
                                *(repr(float(getattr(self.methods[m], metric)[j])) for m in methods)])


def evaluate(mcmc_sets: Sequence[np.ndarray], dl_sets: dict[str, Sequence[np.ndarray]], setting_id: int = 1,
             estimator: str = "gaussian") -> EvalReport:
    """Metrics for every DL method against the shared MCMC sample sets."""
    mcmc_fits = [fit_marginals(np.asarray(s)[:, :3]) for s in mcmc_sets]
    fallbacks = sum(f.fallback for row in mcmc_fits for f in row)
    methods = {}
    for name, sets in dl_sets.items():
        if len(sets) != len(mcmc_sets):
            raise EvaluationError(f"{name}: {len(sets)} sample sets for {len(mcmc_sets)} measurements")
        dl_fits = [fit_marginals(np.asarray(s)[:, :3]) for s in sets]
        fallbacks += sum(f.fallback for row in dl_fits for f in row)
        d_mu, d_sigma = relative_stat_errors(mcmc_fits, dl_fits)
        kl = per_sample_kl(mcmc_sets, sets, estimator, mcmc_fits, dl_fits)
        methods[name] = MethodMetrics(d_mu, d_sigma, kl.mean(axis=0), kl.std(axis=0))
    return EvalReport(methods, len(mcmc_sets), setting_id, estimator, fallbacks)


# ---------------------------------------------------------------------------
# sensitivity sweeps
#
# The sweeps take callables so that they stay independent of how models are
# trained and sampled; petpost.pipeline supplies the concrete ones.


@dataclass
class SweepPoint:
    value: float
    kl_mean: np.ndarray  # per parameter
    kl_std_runs: np.ndarray  # std over repeated training runs (zeros if one run)
    kl_std_samples: np.ndarray  # std of per-sample KL over test measurements
    runs: int = 1


def write_sweep_csv(points: Sequence[SweepPoint], path, value_name: str = "value") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([value_name, "parameter", "kl_mean", "kl_std_runs", "kl_std_samples", "runs"])
        for p in points:
            for j, name in enumerate(PARAM_NAMES):
                w.writerow([repr(float(p.value)), name, repr(float(p.kl_mean[j])), repr(float(p.kl_std_runs[j])),
                            repr(float(p.kl_std_samples[j])), p.runs])


def sweep_hyperparameters(grid: Sequence[float], train_and_sample: Callable[[float, int], Sequence[np.ndarray]],
                          mcmc_sets: Sequence[np.ndarray], repeats: int = 3,
                          estimator: str = "gaussian") -> list[SweepPoint]:
    """D-bar at each grid value, mean and std over ``repeats`` training runs.

    ``train_and_sample(value, run)`` trains the model for one grid value and
    run index and returns its sample sets, one per MCMC sample set.
    """
    points = []
    for value in grid:
        per_run = []
        per_sample = []
        for run in range(repeats):
            kl = per_sample_kl(mcmc_sets, train_and_sample(value, run), estimator)
            per_run.append(kl.mean(axis=0))
            per_sample.append(kl)
        per_run = np.array(per_run)
        points.append(SweepPoint(float(value), per_run.mean(axis=0), per_run.std(axis=0),
                                 np.concatenate(per_sample).std(axis=0), repeats))
    return points


def sweep_training_size(sizes: Sequence[int], train_and_sample: Callable[[int], Sequence[np.ndarray]],
                        mcmc_sets: Sequence[np.ndarray], estimator: str = "gaussian") -> list[SweepPoint]:
    """D-bar per training-set size, with the std of per-sample KL across test measurements."""
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise EvaluationError("training sizes must be ascending")
    points = []
    for n in sizes:
        kl = per_sample_kl(mcmc_sets, train_and_sample(n), estimator)
        points.append(SweepPoint(float(n), kl.mean(axis=0), np.zeros(kl.shape[1]), kl.std(axis=0)))
    return points


def sweep_dvr_shift(dvr_values: Sequence[float],
                    simulate_and_compare: Callable[[float], tuple[Sequence[np.ndarray], Sequence[np.ndarray]]],
                    estimator: str = "gaussian") -> list[SweepPoint]:
    """D-bar versus the DVR used to generate the test measurements.

    ``simulate_and_compare(dvr)`` returns (mcmc_sets, dl_sets) for test
    measurements generated at that DVR.
    """
    points = []
    for dvr in dvr_values:
        mcmc_sets, dl_sets = simulate_and_compare(dvr)
        kl = per_sample_kl(mcmc_sets, dl_sets, estimator)
        points.append(SweepPoint(float(dvr), kl.mean(axis=0), np.zeros(kl.shape[1]), kl.std(axis=0)))
    return points
