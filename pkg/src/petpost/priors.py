"""Prior settings, truncated prior sampling, test-set filtering, datasets."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .kinetics import (
    PARAM_NAMES,
    ForwardModel,
    KineticParams,
    Measurement,
    NoiseModel,
    add_noise,
)

MAX_REJECTION_ATTEMPTS = 10**6
SETTING_SCALE = 1.2


class PriorError(ValueError):
    pass


@dataclass(frozen=True)
class PriorConfig:
    """Independent Gaussians on (DVR, k2 [min^-1], R1), truncated to > 0.

    ``spread`` is read as a variance when ``spread_is_variance`` is set and
    as a standard deviation otherwise.
    """

    location: tuple[float, float, float] = (1.0, 0.0006, 0.74)
    spread: tuple[float, float, float] = (1.0, 0.01, 1.0)
    spread_is_variance: bool = False
    setting_id: int = 1

    def __post_init__(self):
        if len(self.location) != 3 or len(self.spread) != 3:
            raise PriorError("prior needs three locations and three spreads")
        if any(s <= 0 for s in self.spread):
            raise PriorError("prior spreads must be strictly positive")
        object.__setattr__(self, "location", tuple(float(v) for v in self.location))
        object.__setattr__(self, "spread", tuple(float(v) for v in self.spread))

    @property
    def mean(self) -> np.ndarray:
        return np.array(self.location)

    @property
    def std(self) -> np.ndarray:
        s = np.array(self.spread)
        return np.sqrt(s) if self.spread_is_variance else s

    def log_density(self, x) -> float:
        """Unnormalized log density; -inf outside the positive orthant."""
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            return -np.inf
        z = (x - self.mean) / self.std
        return -0.5 * float(z @ z)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        return cls(
            location=tuple(d["location"]),
            spread=tuple(d["spread"]),
            spread_is_variance=bool(d.get("spread_is_variance", False)),
            setting_id=int(d.get("setting_id", 1)),
        )


def make_setting(base: PriorConfig, setting_id: int) -> PriorConfig:
    """Settings 2/3/4 raise the mean / variance / both by 20% over setting 1."""
    if setting_id not in (1, 2, 3, 4):
        raise PriorError(f"invalid prior setting {setting_id!r}; expected 1-4")
    if base.setting_id != 1:
        raise PriorError("make_setting expects the setting-1 base prior")
    loc = np.array(base.location)
    spread = np.array(base.spread)
    if setting_id in (2, 4):
        loc = loc * SETTING_SCALE
    if setting_id in (3, 4):
        spread = spread * (SETTING_SCALE if base.spread_is_variance else np.sqrt(SETTING_SCALE))
    return replace(base, location=tuple(loc), spread=tuple(spread), setting_id=setting_id)


def _draw_truncated(config: PriorConfig, rng: np.random.Generator, n: int) -> tuple[np.ndarray, int]:
    """n positive triples by rejection; returns (draws, attempts used)."""
    out = np.empty((n, 3))
    filled = attempts = 0
    mean, std = config.mean, config.std
    while filled < n:
        if attempts >= MAX_REJECTION_ATTEMPTS * max(n, 1):
            raise PriorError("prior truncation rejection limit exceeded")
        batch = max(2 * (n - filled), 64)
        cand = mean + std * rng.standard_normal((batch, 3))
        attempts += batch
        ok = cand[np.all(cand > 0, axis=1)]
        take = min(len(ok), n - filled)
        out[filled:filled + take] = ok[:take]
        filled += take
    return out, attempts


def _draw_one(config: PriorConfig, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    mean, std = config.mean, config.std
    for attempt in range(1, MAX_REJECTION_ATTEMPTS + 1):
        x = mean + std * rng.standard_normal(3)
        if np.all(x > 0):
            return x, attempt
    raise PriorError("prior truncation rejection limit exceeded")


def sample_prior(config: PriorConfig, rng: np.random.Generator) -> KineticParams:
    return KineticParams.from_array(_draw_one(config, rng)[0])


def truncation_acceptance(config: PriorConfig) -> float:
    """Probability that an untruncated prior draw is positive in every component."""
    from scipy.stats import norm

    return float(np.prod(norm.sf(0.0, loc=config.mean, scale=config.std)))


def within_alpha(x: np.ndarray, center, alpha: float) -> np.ndarray:
    x = np.atleast_2d(x)
    center = np.asarray(center, dtype=float)
    return np.all(np.abs(x - center) / center < alpha, axis=1)


def select_test_params(config: PriorConfig, m: int = 200, alpha: float = 0.26,
                       rng: np.random.Generator | None = None) -> list[KineticParams]:
    """Draw from the prior until m triples lie within relative distance alpha
    of the prior locations in all three components."""
    if m < 1:
        raise PriorError("need at least one test parameter")
    if not alpha > 0:
        raise PriorError("alpha must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    kept: list[np.ndarray] = []
    n_kept = 0
    chunk = 4096
    while n_kept < m:
        draws, _ = _draw_truncated(config, rng, chunk)
        ok = draws[within_alpha(draws, config.location, alpha)]
        kept.append(ok)
        n_kept += len(ok)
        chunk = min(chunk * 2, 1 << 20)
    sel = np.concatenate(kept)[:m]
    return [KineticParams.from_array(row) for row in sel]


@dataclass
class Dataset:
    params: np.ndarray  # (D, 3): dvr, k2 [min^-1], r1
    y: np.ndarray  # (D, N)
    noise_sigma: np.ndarray  # (D,)
    seed: int
    prior: PriorConfig
    truncation_acceptance: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.params)

    def pairs(self):
        for x, y in zip(self.params, self.y):
            yield KineticParams.from_array(x), y

    def subset(self, n: int) -> "Dataset":
        """First n samples (nested subsets for the training-size sweep)."""
        return replace(self, params=self.params[:n], y=self.y[:n], noise_sigma=self.noise_sigma[:n])


def simulate_measurement(params: KineticParams, forward: ForwardModel, noise: NoiseModel,
                         rng: np.random.Generator, noise_sigma: float | None = None) -> tuple[Measurement, float]:
    return add_noise(forward.measurement(params), noise, rng, noise_sigma)


def generate_dataset(config: PriorConfig, size: int, noise: NoiseModel, forward: ForwardModel,
                     seed: int, noise_sigma: float | None = None) -> Dataset:
    """Prior draws pushed through the forward model and noise model.

    Sample i uses its own generator seeded by (seed, i), so any prefix of a
    dataset is reproduced by a smaller run with the same seed.
    """
    if size < 1:
        raise PriorError("dataset size must be >= 1")
    params = np.empty((size, 3))
    ys = np.empty((size, forward.schedule.n_frames))
    sigmas = np.empty(size)
    attempts = 0
    for i in range(size):
        rng = np.random.default_rng([seed, i])
        x, used = _draw_one(config, rng)
        attempts += used
        params[i] = x
        meas, s = simulate_measurement(KineticParams.from_array(x), forward, noise, rng, noise_sigma)
        ys[i] = meas.y
        sigmas[i] = s
    return Dataset(params, ys, sigmas, seed, config, truncation_acceptance=size / attempts)


def measurement_columns(n_frames: int) -> list[str]:
    return [*PARAM_NAMES, "noise_sigma", *(f"y_{i + 1}" for i in range(n_frames))]


def write_samples_csv(path, params: np.ndarray, noise_sigma: np.ndarray, y: np.ndarray) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(measurement_columns(y.shape[1]))
        for x, s, row in zip(params, noise_sigma, y):
            w.writerow([repr(float(v)) for v in (*x, s, *row)])


def read_samples_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`write_samples_csv`: (params, noise_sigma, y)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != [*PARAM_NAMES, "noise_sigma"]:
            raise PriorError(f"{path}: unexpected header {header[:4]}")
        data = np.array([[float(v) for v in row] for row in reader if row], dtype=float)
    data = data.reshape(-1, len(header))
    return data[:, :3], data[:, 3], data[:, 4:]


def save_dataset(ds: Dataset, path) -> Path:
    """Write ``<path>`` (CSV) plus ``<path>.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    write_samples_csv(path, ds.params, ds.noise_sigma, ds.y)
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = {
        "prior": ds.prior.to_dict(),
        "prior_setting": ds.prior.setting_id,
        "spread_is_variance": ds.prior.spread_is_variance,
        "seed": ds.seed,
        "size": len(ds),
        "truncation_acceptance": ds.truncation_acceptance,
        **ds.meta,
    }
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return sidecar


def load_dataset(path) -> Dataset:
    path = Path(path)
    params, sigmas, y = read_samples_csv(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    prior = PriorConfig.from_dict(meta["prior"]) if "prior" in meta else PriorConfig()
    extra = {k: v for k, v in meta.items()
             if k not in ("prior", "prior_setting", "spread_is_variance", "seed", "size", "truncation_acceptance")}
    return Dataset(params, y, sigmas, int(meta.get("seed", 0)), prior,
                   float(meta.get("truncation_acceptance", float("nan"))), extra)
