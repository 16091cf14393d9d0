"""SRTM forward model: reference TAC, target TAC, frame integration, noise.

Time is in seconds everywhere inside this module.  ``k2`` is carried in
min^-1 on :class:`KineticParams` and converted to s^-1 exactly once, in
:func:`_rate_per_s`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

SECONDS_PER_MINUTE = 60.0

# (count, duration_s) blocks of the 54-frame, 7200 s acquisition
DEFAULT_FRAME_BLOCKS = ((6, 10.0), (8, 15.0), (6, 30.0), (8, 60.0), (8, 120.0), (18, 300.0))

# Peaked-decay reference curve
#   C_R(t) = amplitude * (1 - exp(-t/rise)) * (w_fast exp(-t/fast) + (1 - w_fast) exp(-t/slow))
DEFAULT_REFERENCE_COEFFS = {
    "amplitude": 5e-2,
    "rise_s": 60.0,
    "fast_s": 400.0,
    "slow_s": 5000.0,
    "w_fast": 0.55,
}


class KineticsError(ValueError):
    pass


class InvalidGridError(KineticsError):
    pass


class AlignmentError(KineticsError):
    pass


@dataclass(frozen=True)
class KineticParams:
    dvr: float
    k2: float  # min^-1
    r1: float

    def __post_init__(self):
        if not (self.dvr > 0 and self.k2 > 0 and self.r1 > 0):
            raise KineticsError(f"kinetic parameters must be positive, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.dvr, self.k2, self.r1])

    @classmethod
    def from_array(cls, values) -> "KineticParams":
        dvr, k2, r1 = (float(v) for v in values)
        return cls(dvr, k2, r1)


PARAM_NAMES = ("dvr", "k2_per_min", "r1")


@dataclass(frozen=True)
class FrameSchedule:
    durations: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.durations, dtype=float)
        if d.ndim != 1 or d.size == 0 or np.any(d <= 0):
            raise KineticsError("frame durations must be a non-empty list of positive values")
        object.__setattr__(self, "durations", d)

    @classmethod
    def from_blocks(cls, blocks=DEFAULT_FRAME_BLOCKS) -> "FrameSchedule":
        return cls(np.concatenate([np.full(int(n), float(dt)) for n, dt in blocks]))

    @property
    def boundaries(self) -> np.ndarray:
        """Frame edges t_0 = 0, t_1, ..., t_N."""
        return np.concatenate([[0.0], np.cumsum(self.durations)])

    @property
    def total(self) -> float:
        return float(self.durations.sum())

    @property
    def n_frames(self) -> int:
        return int(self.durations.size)

    def noise_weights(self) -> np.ndarray:
        """sqrt(dt_n / T); per-frame noise std is noise_sigma times this."""
        return np.sqrt(self.durations / self.total)


def default_schedule() -> FrameSchedule:
    return FrameSchedule.from_blocks()


@dataclass(frozen=True)
class ReferenceTac:
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        _check_grid(grid)
        if values.shape != grid.shape:
            raise InvalidGridError("reference values and grid differ in length")
        if np.any(values < 0):
            raise KineticsError("reference TAC must be non-negative")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def step(self) -> float:
        return float(self.grid[1] - self.grid[0])


@dataclass(frozen=True)
class Measurement:
    y: np.ndarray
    schedule: FrameSchedule = field(default_factory=default_schedule)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.shape != (self.schedule.n_frames,):
            raise KineticsError(f"measurement has {y.size} frames, schedule has {self.schedule.n_frames}")
        object.__setattr__(self, "y", y)


@dataclass(frozen=True)
class NoiseModel:
    """noise_sigma ~ scale * Gamma(shape, rate)."""

    scale: float = 1e-4
    shape: float = 1.0
    rate: float = 1.0

    def draw_sigma(self, rng: np.random.Generator) -> float:
        return self.scale * rng.gamma(self.shape, 1.0 / self.rate)

    def log_prior(self, noise_sigma: float) -> float:
        # Gamma density of noise_sigma/scale, constants dropped
        if noise_sigma <= 0:
            return -np.inf
        u = noise_sigma / self.scale
        return (self.shape - 1.0) * np.log(u) - self.rate * u


def make_grid(total: float, step: float = 0.1) -> np.ndarray:
    n = int(round(total / step))
    if n < 1 or abs(n * step - total) > 1e-9 * max(total, 1.0):
        raise InvalidGridError(f"step {step} does not divide total {total}")
    return np.arange(n + 1) * step


def _check_grid(grid: np.ndarray) -> None:
    if grid.ndim != 1 or grid.size < 2:
        raise InvalidGridError("grid must be one-dimensional with at least two points")
    steps = np.diff(grid)
    h = steps[0]
    if h <= 0 or np.max(np.abs(steps - h)) > 1e-6 * h:
        raise InvalidGridError("grid must be uniform and increasing")


def default_reference_tac(grid, coeffs: dict | None = None) -> ReferenceTac:
    """Smooth non-negative reference curve with an early peak and slow washout."""
    grid = np.asarray(grid, dtype=float)
    _check_grid(grid)
    c = {**DEFAULT_REFERENCE_COEFFS, **(coeffs or {})}
    t = grid - grid[0]
    rise = -np.expm1(-t / c["rise_s"])
    washout = c["w_fast"] * np.exp(-t / c["fast_s"]) + (1.0 - c["w_fast"]) * np.exp(-t / c["slow_s"])
    return ReferenceTac(grid, c["amplitude"] * rise * washout)


def load_reference_tac(path, step: float = 0.1, total: float | None = None) -> ReferenceTac:
    """Read a two-column (time_s, value) CSV with header and resample it.

    The file is linearly interpolated onto a uniform grid of ``step`` seconds
    spanning [0, total] (default: the last time in the file).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InvalidGridError(f"{path}: empty reference file")
        rows = [(float(r[0]), float(r[1])) for r in reader if r]
    if len(rows) < 2:
        raise InvalidGridError(f"{path}: need at least two samples")
    t, v = np.array(rows).T
    if np.any(np.diff(t) <= 0):
        raise InvalidGridError(f"{path}: time column must be strictly increasing")
    total = float(t[-1]) if total is None else total
    grid = make_grid(total, step)
    return ReferenceTac(grid, np.interp(grid, t, v))


def _rate_per_s(k2_per_min: float) -> float:
    return k2_per_min / SECONDS_PER_MINUTE


def _expint_weights(lam: float, h: float) -> tuple[float, float, float]:
    """Exact weights for int_0^h C(t_i + s) exp(-lam (h - s)) ds, C linear.

    Returns (decay, w_left, w_right) with the integral equal to
    w_left * C_i + w_right * C_{i+1}.
    """
    if lam == 0.0:
        return 1.0, h / 2, h / 2
    x = lam * h
    decay = np.exp(-x)
    if x < 1e-3:
        # 1 - e^-x (1 + x) loses all digits to cancellation here; the series
        # are written in h so that a vanishing lam never divides
        i0 = h * (1.0 - x / 2 + x * x / 6 - x**3 / 24 + x**4 / 120)
        i1 = h * h * (0.5 - x / 3 + x * x / 8 - x**3 / 30 + x**4 / 144)
    else:
        i0 = -np.expm1(-x) / lam
        i1 = (1.0 - decay * (1.0 + x)) / lam**2
    w_left = i1 / h
    return decay, w_left, i0 - w_left


def exp_convolution(ref: ReferenceTac, lam: float) -> np.ndarray:
    """(C_R conv exp(-lam t))(t) on the reference grid, lam in s^-1.

    O(n) recurrence, exact for piecewise-linear C_R.
    """
    decay, w_left, w_right = _expint_weights(lam, ref.step)
    c = ref.values
    drive = np.empty_like(c)
    drive[0] = 0.0
    drive[1:] = w_left * c[:-1] + w_right * c[1:]
    return lfilter([1.0], [1.0, -decay], drive)


def srtm_target_tac(params: KineticParams, ref: ReferenceTac) -> np.ndarray:
    """C_T = R1 C_R + (k2 - R1 k2 / DVR) * (C_R conv exp(-(k2/DVR) t))."""
    k2 = _rate_per_s(params.k2)
    lam = k2 / params.dvr
    coef = k2 - params.r1 * lam
    return params.r1 * ref.values + coef * exp_convolution(ref, lam)


def srtm_ode_oracle(params: KineticParams | tuple, ref: ReferenceTac) -> np.ndarray:
    """Classical RK4 on dC_T/dt = R1 C_R' + k2 C_R - (k2/DVR) C_T.

    C_R is treated as piecewise linear between grid samples.  Test oracle
    only; accepts raw (dvr, k2, r1) tuples so that degenerate values such as
    r1 = k2 = 0 can be exercised.
    """
    dvr, k2_min, r1 = (params.dvr, params.k2, params.r1) if isinstance(params, KineticParams) else params
    k2 = _rate_per_s(k2_min)
    lam = k2 / dvr
    h = ref.step
    c = ref.values
    slope = np.diff(c) / h
    out = np.empty_like(c)
    ct = r1 * c[0]
    out[0] = ct
    for i in range(c.size - 1):
        s = slope[i]
        cr0 = c[i]
        crm = cr0 + 0.5 * h * s
        cr1 = c[i + 1]
        f0 = r1 * s + k2 * cr0
        fm = r1 * s + k2 * crm
        f1 = r1 * s + k2 * cr1
        q1 = f0 - lam * ct
        q2 = fm - lam * (ct + 0.5 * h * q1)
        q3 = fm - lam * (ct + 0.5 * h * q2)
        q4 = f1 - lam * (ct + h * q3)
        ct = ct + h / 6.0 * (q1 + 2 * q2 + 2 * q3 + q4)
        out[i + 1] = ct
    return out


def frame_indices(grid: np.ndarray, schedule: FrameSchedule) -> np.ndarray:
    """Grid indices of every frame boundary; raises if any is off-grid."""
    grid = np.asarray(grid, dtype=float)
    h = grid[1] - grid[0]
    pos = (schedule.boundaries - grid[0]) / h
    idx = np.rint(pos).astype(int)
    if np.any(np.abs(pos - idx) > 1e-6) or idx[0] < 0 or idx[-1] >= grid.size:
        raise AlignmentError("frame boundaries do not fall on grid points inside the curve")
    return idx


def integrate_frames(curve, grid, schedule: FrameSchedule) -> Measurement:
    """Trapezoidal integral of a fine-grid curve over each frame."""
    curve = np.asarray(curve, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if curve.shape != grid.shape:
        raise KineticsError("curve and grid differ in length")
    idx = frame_indices(grid, schedule)
    h = grid[1] - grid[0]
    cum = np.concatenate([[0.0], np.cumsum(0.5 * h * (curve[1:] + curve[:-1]))])
    return Measurement(np.diff(cum[idx]), schedule)


def add_noise(clean: Measurement, noise: NoiseModel, rng: np.random.Generator,
              noise_sigma: float | None = None) -> tuple[Measurement, float]:
    """Scaled Gaussian frame noise; returns the noisy copy and noise_sigma.

    ``noise_sigma`` overrides the Gamma draw when given.
    """
    if noise_sigma is None:
        noise_sigma = noise.draw_sigma(rng)
    std = noise_sigma * clean.schedule.noise_weights()
    eps = rng.standard_normal(clean.schedule.n_frames)
    return Measurement(clean.y + std * eps, clean.schedule), float(noise_sigma)


class ForwardModel:
    """Cached kinetics -> noiseless frame integrals for repeated evaluation.

    The reference frame integrals and boundary indices are computed once;
    each call costs one convolution pass over the fine grid.
    """

    def __init__(self, ref: ReferenceTac, schedule: FrameSchedule | None = None):
        self.ref = ref
        self.schedule = schedule or default_schedule()
        self._idx = frame_indices(ref.grid, self.schedule)
        self._h = ref.step
        self._ref_frames = self._frames(ref.values)

    def _frames(self, curve: np.ndarray) -> np.ndarray:
        cum = np.concatenate([[0.0], np.cumsum(0.5 * self._h * (curve[1:] + curve[:-1]))])
        return np.diff(cum[self._idx])

    def __call__(self, params: KineticParams) -> np.ndarray:
        return self.frames(params.dvr, params.k2, params.r1)

    def frames(self, dvr: float, k2_per_min: float, r1: float) -> np.ndarray:
        k2 = _rate_per_s(k2_per_min)
        lam = k2 / dvr
        coef = k2 - r1 * lam
        return r1 * self._ref_frames + coef * self._frames(exp_convolution(self.ref, lam))

    def measurement(self, params: KineticParams) -> Measurement:
        return Measurement(self(params), self.schedule)


def save_reference_tac(ref: ReferenceTac, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "value"])
        for t, v in zip(ref.grid, ref.values):
            w.writerow([repr(float(t)), repr(float(v))])
