"""Random-walk Metropolis-Hastings reference sampler and Geweke check.

The chain state is (DVR, k2, R1, log noise_sigma).  The log-space move on
noise_sigma is symmetric, so the target in that coordinate carries the
Jacobian term ``+ log noise_sigma``.

Proposal scales may be adapted during burn-in (Robbins-Monro on a global
scale, plus periodic re-estimation of the proposal covariance from the
recent burn-in history).  Everything is frozen at the end of burn-in, so
the retained segment is an ordinary fixed-kernel Metropolis chain.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .kinetics import PARAM_NAMES, ForwardModel, KineticParams, Measurement, NoiseModel
from .priors import PriorConfig

SOURCES = ("mcmc", "cvae-vanilla", "cvae-dual-encoder", "cvae-dual-decoder")
GEWEKE_THRESHOLD = 1e-3


class McmcError(RuntimeError):
    pass


class InitializationError(McmcError):
    pass


@dataclass
class McmcConfig:
    n_iterations: int = 60_000
    burn_in: int = 15_000
    # starting proposal std per coordinate of ``space`` (plus log noise_sigma);
    # None derives a Gauss-Newton covariance at the starting point
    proposal_scales: tuple[float, ...] | None = None
    adapt_during_burnin: bool = True
    target_acceptance: float = 0.3
    # "full": covariance re-estimated during burn-in; "diagonal": variances only
    proposal: str = "full"
    adapt_interval: int = 100
    sample_noise: bool = True
    # "prior-mean" or "map" (least-squares refinement from the prior means)
    init: str = "map"
    # "kinetic": walk on (DVR, k2, R1); "ridge": walk on (log(k2/DVR), k2 - R1 k2/DVR, R1)
    space: str = "ridge"

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iterations:
            raise McmcError("need 0 <= burn_in < n_iterations")
        if self.proposal_scales is not None and any(s <= 0 for s in self.proposal_scales):
            raise McmcError("proposal scales must be positive")
        if self.proposal not in ("full", "diagonal"):
            raise McmcError(f"unknown proposal kind {self.proposal!r}")
        if self.init not in ("prior-mean", "map"):
            raise McmcError(f"unknown init {self.init!r}")
        if self.space not in ("kinetic", "ridge"):
            raise McmcError(f"unknown sampling space {self.space!r}")

    @property
    def n_retained(self) -> int:
        return self.n_iterations - self.burn_in

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "McmcConfig":
        d = dict(d)
        if d.get("proposal_scales") is not None:
            d["proposal_scales"] = tuple(d["proposal_scales"])
        return cls(**d)


@dataclass
class PosteriorSamples:
    draws: np.ndarray  # (S, 3) or (S, 4) with a trailing noise_sigma column
    source: str
    measurement_id: str = ""

    def __post_init__(self):
        if self.source not in SOURCES:
            raise McmcError(f"unknown posterior source {self.source!r}")
        self.draws = np.asarray(self.draws, dtype=float)

    @property
    def kinetic(self) -> np.ndarray:
        return self.draws[:, :3]

    def __len__(self) -> int:
        return len(self.draws)

    def to_csv(self, path) -> None:
        cols = list(PARAM_NAMES) + (["noise_sigma"] if self.draws.shape[1] == 4 else [])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "measurement_id", *cols])
            for row in self.draws:
                w.writerow([self.source, self.measurement_id, *(repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path) -> "PosteriorSamples":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [r for r in reader if r]
        if header[:2] != ["source", "measurement_id"] or not rows:
            raise McmcError(f"{path}: not a posterior sample file")
        draws = np.array([[float(v) for v in r[2:]] for r in rows])
        return cls(draws, rows[0][0], rows[0][1])


@dataclass
class GewekeReport:
    mean_first_10pct: np.ndarray
    mean_last_50pct: np.ndarray
    abs_difference: np.ndarray
    # difference divided by the trace std, reported for diagnostics only
    scaled_difference: np.ndarray

    def passed(self, threshold: float = GEWEKE_THRESHOLD) -> bool:
        return bool(np.all(self.abs_difference < threshold))

    def to_dict(self, names=PARAM_NAMES) -> dict:
        names = list(names)[: len(self.abs_difference)]
        return {
            "parameters": names,
            "mean_first_10pct": self.mean_first_10pct.tolist(),
            "mean_last_50pct": self.mean_last_50pct.tolist(),
            "abs_difference": self.abs_difference.tolist(),
            "scaled_difference": self.scaled_difference.tolist(),
            "threshold": GEWEKE_THRESHOLD,
            "passed": self.passed(),
        }


def geweke(trace) -> GewekeReport:
    """Compare the mean of the first 10% and last 50% of post-burn-in draws."""
    trace = np.asarray(trace, dtype=float)
    if trace.ndim == 1:
        trace = trace[:, None]
    n = len(trace)
    if n == 0:
        raise McmcError("empty trace")
    if n < 10:
        raise McmcError("geweke needs at least 10 draws")
    first = trace[: int(round(0.1 * n))].mean(axis=0)
    last = trace[n - int(round(0.5 * n)):].mean(axis=0)
    diff = np.abs(first - last)
    sd = trace.std(axis=0)
    scaled = np.divide(diff, sd, out=np.zeros_like(diff), where=sd > 0)
    return GewekeReport(first, last, diff, scaled)


@dataclass
class ChainResult:
    samples: PosteriorSamples
    trace: np.ndarray  # (n_iterations + 1, dim) including the initial state
    log_post: np.ndarray
    accepted: np.ndarray  # bool per iteration (index 0 is the initial state)
    geweke: GewekeReport
    acceptance_rate: float  # post-burn-in
    proposal_cov: np.ndarray
    adaptation_log: list = field(default_factory=list)  # (iteration, global scale) at every update


def log_likelihood(frames: np.ndarray, y: np.ndarray, noise_sigma: float, weights: np.ndarray) -> float:
    """Gaussian frame likelihood with std noise_sigma*weights; 2*pi constants dropped."""
    if not noise_sigma > 0:
        return -np.inf
    std = noise_sigma * weights
    r = (y - frames) / std
    return float(-np.sum(np.log(std)) - 0.5 * (r @ r))


def log_posterior(params, noise_sigma: float, y: Measurement | np.ndarray, prior: PriorConfig,
                  forward: ForwardModel, noise: NoiseModel | None = None) -> float:
    """log p(y | x, noise_sigma) + log p(x) + log p(noise_sigma), up to a constant."""
    x = params.as_array() if isinstance(params, KineticParams) else np.asarray(params, dtype=float)
    if np.any(x <= 0) or not noise_sigma > 0:
        return -np.inf
    noise = noise or NoiseModel()
    yv = y.y if isinstance(y, Measurement) else np.asarray(y, dtype=float)
    frames = forward.frames(*x)
    return (log_likelihood(frames, yv, noise_sigma, forward.schedule.noise_weights())
            + prior.log_density(x) + noise.log_prior(noise_sigma))


def metropolis(log_target: Callable[[np.ndarray], float], x0, n_iterations: int, burn_in: int,
               scales, rng: np.random.Generator, adapt: bool = True, target_acceptance: float = 0.3,
               full_covariance: bool = True, adapt_interval: int = 100):
    """Generic random-walk Metropolis with burn-in-only adaptation.

    ``scales`` is either per-coordinate step sizes or a full starting
    proposal covariance.  Returns (trace, log_post, accepted, proposal_cov,
    adaptation_log).
    """
    x = np.array(x0, dtype=float)
    d = x.size
    lp = log_target(x)
    if not np.isfinite(lp):
        raise InitializationError(f"non-finite log target at the initial state {x}")
    scales = np.asarray(scales, dtype=float)
    base_cov = scales.copy() if scales.ndim == 2 else np.diag(scales**2)
    chol = np.linalg.cholesky(base_cov)
    log_c = 0.0
    trace = np.empty((n_iterations + 1, d))
    log_post = np.empty(n_iterations + 1)
    accepted = np.zeros(n_iterations + 1, dtype=bool)
    trace[0], log_post[0] = x, lp
    adaptation_log: list = []
    shrink = 2.38**2 / d
    for i in range(1, n_iterations + 1):
        adapting = adapt and i <= burn_in
        step = np.exp(log_c) * (chol @ rng.standard_normal(d))
        prop = x + step
        lp_prop = log_target(prop)
        log_u = np.log(rng.uniform())
        log_ratio = lp_prop - lp
        if log_u < log_ratio:
            x, lp = prop, lp_prop
            accepted[i] = True
        trace[i], log_post[i] = x, lp
        if adapting:
            acc_prob = 1.0 if log_ratio >= 0 else (np.exp(log_ratio) if np.isfinite(log_ratio) else 0.0)
            log_c += min(0.5, 10.0 / (i + 10) ** 0.6) * (acc_prob - target_acceptance)
            if i % adapt_interval == 0 and i >= 2 * adapt_interval:
                window = trace[i // 2: i + 1]
                emp = np.cov(window, rowvar=False) if full_covariance else np.diag(window.var(axis=0))
                emp = np.atleast_2d(emp)
                if np.all(np.isfinite(emp)) and np.all(np.diag(emp) > 0):
                    # keep a little of the previous proposal so a stuck window cannot collapse it
                    cand = shrink * emp + 1e-6 * np.diag(np.diag(base_cov))
                    try:
                        chol = np.linalg.cholesky(cand)
                        base_cov = cand
                        log_c = 0.0
                    except np.linalg.LinAlgError:
                        pass
                adaptation_log.append((i, float(np.exp(log_c))))
    return trace, log_post, accepted, np.exp(2 * log_c) * base_cov, adaptation_log


def to_ridge(x: np.ndarray) -> np.ndarray:
    """(DVR, k2, R1) -> (log b, a, R1) with b = k2/DVR and a = k2 - R1 b.

    The data pin R1 and a tightly while b is weakly identified; in these
    coordinates the SRTM posterior is close to Gaussian.
    """
    dvr, k2, r1 = x
    b = k2 / dvr
    return np.array([np.log(b), k2 - r1 * b, r1])


def from_ridge(u: np.ndarray) -> tuple[np.ndarray, float]:
    """Inverse of :func:`to_ridge` and log |det d(x)/d(u)| (= log DVR)."""
    log_b, a, r1 = u
    b = np.exp(log_b)
    k2 = a + r1 * b
    dvr = k2 / b
    return np.array([dvr, k2, r1]), (np.log(dvr) if dvr > 0 else -np.inf)


def _map_start(x0: np.ndarray, y: np.ndarray, forward: ForwardModel, weights: np.ndarray) -> np.ndarray:
    """Weighted least-squares refinement of the kinetic parameters, in log space."""
    from scipy.optimize import least_squares

    def resid(u):
        return (forward.frames(*np.exp(u)) - y) / weights

    try:
        sol = least_squares(resid, np.log(x0), method="lm", xtol=1e-12, ftol=1e-12, max_nfev=2000)
    except Exception:  # noqa: BLE001  optimizer failure falls back to the prior means
        return x0
    x = np.exp(sol.x)
    return x if np.all(np.isfinite(x)) else x0


def _laplace_cov(u0: np.ndarray, y: np.ndarray, forward: ForwardModel, weights: np.ndarray, sigma: float,
                 to_kinetic: Callable) -> np.ndarray | None:
    """Gauss-Newton covariance sigma^2 (J^T J)^-1 of the kinetic coordinates at u0, or None if singular."""

    def frames(u):
        return forward.frames(*to_kinetic(u)[0]) / weights

    jac = np.empty((len(y), len(u0)))
    for j in range(len(u0)):
        h = 1e-6 * max(abs(u0[j]), 1e-9)
        up, dn = u0.copy(), u0.copy()
        up[j] += h
        dn[j] -= h
        jac[:, j] = (frames(up) - frames(dn)) / (2 * h)
    try:
        cov = sigma**2 * np.linalg.inv(jac.T @ jac)
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return None
    return cov if np.all(np.isfinite(cov)) else None


def run_chain(y: Measurement | np.ndarray, config: McmcConfig, prior: PriorConfig, forward: ForwardModel,
              rng: np.random.Generator, noise: NoiseModel | None = None, measurement_id: str = "",
              noise_sigma: float | None = None) -> ChainResult:
    """Sample p(x, noise_sigma | y) and return the post-burn-in kinetic draws.

    With ``config.sample_noise`` false the noise level is held at
    ``noise_sigma`` (required in that case).
    """
    noise = noise or NoiseModel()
    yv = y.y if isinstance(y, Measurement) else np.asarray(y, dtype=float)
    weights = forward.schedule.noise_weights()
    x0 = prior.mean.copy()
    if config.init == "map":
        x0 = _map_start(x0, yv, forward, weights)
    r0 = (yv - forward.frames(*x0)) / weights
    sigma0 = float(np.sqrt(np.mean(r0**2)))
    if not np.isfinite(sigma0) or sigma0 <= 0:
        sigma0 = noise.scale * noise.shape / noise.rate

    scales = (np.asarray(config.proposal_scales, dtype=float) if config.proposal_scales is not None
              else np.append(0.05 * prior.std, 0.05))

    ridge = config.space == "ridge"
    start_cov = None
    if ridge and config.proposal_scales is None:
        u0 = to_ridge(x0)
        scales = np.concatenate([[0.05, 0.05 * max(abs(u0[1]), 1e-3 * x0[1]), scales[2]], scales[3:]])
        start_cov = _laplace_cov(u0, yv, forward, weights, sigma0, from_ridge)
    elif config.proposal_scales is None:
        start_cov = _laplace_cov(x0, yv, forward, weights, sigma0, lambda v: (v, 0.0))
    if start_cov is not None:
        # the noise coordinate is log sigma; its Fisher variance is 1/(2 n)
        start_cov = np.pad(start_cov, (0, 1))
        start_cov[3, 3] = 1.0 / (2 * len(yv))
        start_cov *= 2.38**2 / 4
        if not config.sample_noise:
            start_cov = start_cov[:3, :3]

    def kinetic(s):
        if ridge:
            x, log_jac = from_ridge(s[:3])
            return x, log_jac
        return s[:3], 0.0

    if not config.sample_noise:
        if noise_sigma is None:
            raise McmcError("a fixed noise_sigma is required when sample_noise is off")
        scales = scales[:3]

    def target(s):
        # far-out proposals can overflow the ridge map; they are simply rejected
        with np.errstate(all="ignore"):
            x, log_jac = kinetic(s)
            if not np.all(np.isfinite(x)) or np.any(x <= 0):
                return -np.inf
            if config.sample_noise:
                value = log_posterior(x, np.exp(s[3]), yv, prior, forward, noise) + s[3] + log_jac
            else:
                value = log_posterior(x, noise_sigma, yv, prior, forward, noise) + log_jac
        return value if np.isfinite(value) else -np.inf

    start = to_ridge(x0) if ridge else x0
    if config.sample_noise:
        start = np.append(start, np.log(sigma0))

    trace, lp, acc, cov, alog = metropolis(
        target, start, config.n_iterations, config.burn_in, scales if start_cov is None else start_cov, rng,
        adapt=config.adapt_during_burnin, target_acceptance=config.target_acceptance,
        full_covariance=config.proposal == "full", adapt_interval=config.adapt_interval)
    trace = trace.copy()
    if ridge:
        trace[:, :3] = np.array([from_ridge(u)[0] for u in trace[:, :3]])
    if config.sample_noise:
        trace[:, 3] = np.exp(trace[:, 3])
    retained = trace[config.burn_in + 1:]
    return ChainResult(
        samples=PosteriorSamples(retained.copy(), "mcmc", measurement_id),
        trace=trace,
        log_post=lp,
        accepted=acc,
        geweke=geweke(retained[:, :3]),
        acceptance_rate=float(acc[config.burn_in + 1:].mean()),
        proposal_cov=cov,
        adaptation_log=alog,
    )


def write_trace(result: ChainResult, path) -> None:
    has_noise = result.trace.shape[1] == 4
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", *PARAM_NAMES, "noise_sigma", "log_post", "accepted"])
        for i, (row, lp, a) in enumerate(zip(result.trace, result.log_post, result.accepted)):
            sigma = repr(float(row[3])) if has_noise else ""
            w.writerow([i, *(repr(float(v)) for v in row[:3]), sigma, repr(float(lp)), int(a)])


def write_geweke(result: ChainResult, path) -> None:
    payload = {**result.geweke.to_dict(), "acceptance_rate": result.acceptance_rate,
               "n_retained": len(result.samples)}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
