"""Experiment orchestration shared by the CLI and the acceptance suite.

Every random quantity is drawn from a generator seeded by the master seed
plus a fixed stream tag and an item index, so results do not depend on how
work is split across processes.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed

from .config import ExperimentConfig
from .cvae import VARIANTS, CvaeModel, sample_posterior, train
from .evaluation import (
    EvalReport,
    SweepPoint,
    evaluate,
    sweep_dvr_shift,
    sweep_hyperparameters,
    sweep_training_size,
)
from .kinetics import (
    FrameSchedule,
    ForwardModel,
    KineticParams,
    NoiseModel,
    default_reference_tac,
    load_reference_tac,
    make_grid,
)
from .mcmc import ChainResult, PosteriorSamples, run_chain, write_geweke, write_trace
from .priors import (
    Dataset,
    PriorConfig,
    generate_dataset,
    make_setting,
    save_dataset,
    select_test_params,
    simulate_measurement,
)

log = logging.getLogger(__name__)

# stream tags mixed into the master seed
STREAM_TEST_PARAMS = 101
STREAM_TEST_NOISE = 102
STREAM_MCMC = 103
STREAM_INFER = 104
STREAM_SHIFT = 105

SWEEP_KINDS = ("beta", "lambda", "train-size", "dvr-shift")


# ---------------------------------------------------------------------------
# building blocks from the config


def build_forward(cfg: ExperimentConfig) -> ForwardModel:
    schedule = FrameSchedule.from_blocks([tuple(b) for b in cfg.kinetics.frame_blocks])
    step = cfg.kinetics.grid_step_s
    if cfg.kinetics.reference_file:
        ref = load_reference_tac(cfg.kinetics.reference_file, step=step, total=schedule.total)
    else:
        ref = default_reference_tac(make_grid(schedule.total, step), cfg.kinetics.reference_coeffs)
    return ForwardModel(ref, schedule)


def build_prior(cfg: ExperimentConfig) -> PriorConfig:
    base = PriorConfig(np.array(cfg.prior.location, dtype=float), np.array(cfg.prior.spread, dtype=float),
                       cfg.prior.spread_is_variance, 1)
    return make_setting(base, cfg.prior.setting_id)


def build_noise(cfg: ExperimentConfig) -> NoiseModel:
    return NoiseModel(cfg.noise.scale, cfg.noise.shape, cfg.noise.rate)


@dataclass
class Context:
    """The resolved model objects for one configuration."""

    cfg: ExperimentConfig
    forward: ForwardModel
    prior: PriorConfig
    noise: NoiseModel

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "Context":
        return cls(cfg, build_forward(cfg), build_prior(cfg), build_noise(cfg))


@dataclass
class HeldOutSet:
    """Held-out measurements with their generating parameters."""

    params: np.ndarray  # (M, 3)
    y: np.ndarray  # (M, N)
    noise_sigma: np.ndarray  # (M,)

    def __len__(self) -> int:
        return len(self.params)

    @property
    def ids(self) -> list[str]:
        return measurement_ids(len(self))

    def as_dataset(self, prior: PriorConfig, seed: int) -> Dataset:
        return Dataset(self.params, self.y, self.noise_sigma, seed, prior, meta={"kind": "test"})


def measurement_ids(m: int) -> list[str]:
    return [f"m{i:04d}" for i in range(m)]


def training_set(ctx: Context, size: int | None = None) -> Dataset:
    size = ctx.cfg.train_size if size is None else size
    ds = generate_dataset(ctx.prior, size, ctx.noise, ctx.forward, seed=ctx.cfg.seed)
    ds.meta["kind"] = "train"
    return ds


def _simulate_cases(ctx: Context, params: np.ndarray, stream: int, tag: int = 0) -> HeldOutSet:
    ys, sigmas = [], []
    for i, x in enumerate(params):
        rng = np.random.default_rng([ctx.cfg.seed, stream, tag, i])
        meas, s = simulate_measurement(KineticParams.from_array(x), ctx.forward, ctx.noise, rng)
        ys.append(meas.y)
        sigmas.append(s)
    return HeldOutSet(np.asarray(params, dtype=float), np.array(ys), np.array(sigmas))


def held_out_set(ctx: Context, m: int | None = None) -> HeldOutSet:
    """Alpha-filtered prior draws, each with its own simulated measurement."""
    m = ctx.cfg.evaluation.n_test if m is None else m
    rng = np.random.default_rng([ctx.cfg.seed, STREAM_TEST_PARAMS])
    chosen = select_test_params(ctx.prior, m, ctx.cfg.evaluation.alpha, rng)
    return _simulate_cases(ctx, np.array([p.as_array() for p in chosen]), STREAM_TEST_NOISE)


def shifted_test_set(ctx: Context, dvr: float, m: int) -> HeldOutSet:
    """Measurements at a fixed DVR with k2 and R1 at the prior locations."""
    loc = ctx.prior.location
    params = np.tile([dvr, loc[1], loc[2]], (m, 1))
    # tag by the DVR value so each curve point has its own noise stream
    tag = int(round(dvr * 1000))
    return _simulate_cases(ctx, params, STREAM_SHIFT, tag)


# ---------------------------------------------------------------------------
# MCMC over many measurements


def _one_chain(y, ctx: Context, seed_key) -> ChainResult:
    rng = np.random.default_rng(seed_key)
    return run_chain(y, ctx.cfg.mcmc, ctx.prior, ctx.forward, rng, ctx.noise)


def run_chains(ctx: Context, ys: np.ndarray, jobs: int = 1, stream_tag: int = 0,
               ids: Sequence[str] | None = None) -> list[ChainResult]:
    """One chain per measurement; chain i is seeded by (seed, stream, tag, i)."""
    ids = list(ids) if ids is not None else measurement_ids(len(ys))
    keys = [[ctx.cfg.seed, STREAM_MCMC, stream_tag, i] for i in range(len(ys))]
    if jobs == 1 or len(ys) <= 1:
        results = [_one_chain(y, ctx, k) for y, k in zip(ys, keys)]
    else:
        results = Parallel(n_jobs=jobs)(delayed(_one_chain)(y, ctx, k) for y, k in zip(ys, keys))
    for r, mid in zip(results, ids):
        r.samples.measurement_id = mid
    return results


def write_chains(results: Sequence[ChainResult], out_dir, traces: bool = True) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for r in results:
        mid = r.samples.measurement_id
        r.samples.to_csv(out_dir / f"{mid}_samples.csv")
        write_geweke(r, out_dir / f"{mid}_geweke.json")
        if traces:
            write_trace(r, out_dir / f"{mid}_trace.csv")


def read_sample_dir(path) -> list[PosteriorSamples]:
    """All ``*_samples.csv`` files in a directory, ordered by measurement id."""
    files = sorted(Path(path).glob("*_samples.csv"))
    return [PosteriorSamples.from_csv(f) for f in files]


# ---------------------------------------------------------------------------
# networks


def train_model(ctx: Context, variant: str, data: Dataset, seed_offset: int = 0, **overrides) -> CvaeModel:
    tc = ctx.cfg.train_config(variant)
    changes = {**overrides, "seed": tc.seed + seed_offset}
    tc = type(tc)(**{**tc.to_dict(), **changes})
    arch = ctx.cfg.network.architecture(data.y.shape[1])
    return train(variant, data.params, data.y, tc, arch, log_params=ctx.cfg.network.log_params)


def infer(ctx: Context, model: CvaeModel, ys: np.ndarray, n_samples: int | None = None,
          ids: Sequence[str] | None = None) -> list[PosteriorSamples]:
    n_samples = ctx.cfg.evaluation.n_samples if n_samples is None else n_samples
    ids = list(ids) if ids is not None else measurement_ids(len(ys))
    return [sample_posterior(model, y, n_samples, seed=[ctx.cfg.seed, STREAM_INFER, i], measurement_id=mid)
            for i, (y, mid) in enumerate(zip(ys, ids))]


def write_samples(samples: Sequence[PosteriorSamples], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        s.to_csv(out_dir / f"{s.measurement_id}_samples.csv")


def evaluate_dirs(mcmc_sets: Sequence[PosteriorSamples], dl: dict[str, Sequence[PosteriorSamples]],
                  cfg: ExperimentConfig) -> EvalReport:
    ids = [s.measurement_id for s in mcmc_sets]
    for name, sets in dl.items():
        other = [s.measurement_id for s in sets]
        if other != ids:
            raise ValueError(f"{name}: measurement ids do not match the MCMC directory")
    report = evaluate([s.kinetic for s in mcmc_sets], {k: [s.kinetic for s in v] for k, v in dl.items()},
                      cfg.prior.setting_id, cfg.evaluation.kl_estimator)
    report.meta["spread_is_variance"] = cfg.prior.spread_is_variance
    return report


# ---------------------------------------------------------------------------
# end-to-end run and sweeps


@dataclass
class RunResult:
    report: EvalReport
    chains: list[ChainResult]
    models: dict[str, CvaeModel]
    dl_samples: dict[str, list[PosteriorSamples]]
    tests: HeldOutSet


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1,
                   variants: Sequence[str] = VARIANTS) -> RunResult:
    """Simulate, sample with MCMC, train every variant, infer and evaluate."""
    ctx = Context.from_config(cfg)
    data = training_set(ctx)
    tests = held_out_set(ctx)
    chains = run_chains(ctx, tests.y, jobs)
    models, dl = {}, {}
    for v in variants:
        models[v] = train_model(ctx, v, data)
        dl[f"cvae-{v}"] = infer(ctx, models[v], tests.y)
    report = evaluate_dirs([c.samples for c in chains], dl, cfg)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_dataset(data, out / "train.csv")
        save_dataset(tests.as_dataset(ctx.prior, cfg.seed), out / "test.csv")
        write_chains(chains, out / "mcmc")
        for v, model in models.items():
            model.save(out / f"model_{v}.json", extra={"seed": cfg.seed})
            write_samples(dl[f"cvae-{v}"], out / f"cvae-{v}")
        report.write_json(out / "report.json")
        report.write_csv(out / "report.csv")
    return RunResult(report, chains, models, dl, tests)


def _grid_value_overrides(kind: str, value: float) -> dict:
    return {"beta": value} if kind == "beta" else {"lam": value}


def run_hyperparameter_sweep(ctx: Context, kind: str, grid: Sequence[float], variant: str, data: Dataset,
                             tests: HeldOutSet, mcmc_sets: Sequence[np.ndarray], repeats: int | None = None,
                             jobs: int = 1, n_samples: int | None = None) -> list[SweepPoint]:
    if kind not in ("beta", "lambda"):
        raise ValueError(f"not a hyperparameter sweep: {kind}")
    if kind == "lambda" and variant != "dual-decoder":
        raise ValueError("the lambda weight only exists for the dual-decoder variant")
    repeats = ctx.cfg.evaluation.sweep_repeats if repeats is None else repeats
    tasks = [(value, run) for value in grid for run in range(repeats)]

    def one(value, run):
        model = train_model(ctx, variant, data, seed_offset=run, **_grid_value_overrides(kind, value))
        return [s.kinetic for s in infer(ctx, model, tests.y, n_samples)]

    if jobs == 1:
        done = [one(v, r) for v, r in tasks]
    else:
        done = Parallel(n_jobs=jobs)(delayed(one)(v, r) for v, r in tasks)
    table = dict(zip(tasks, done))
    return sweep_hyperparameters(grid, lambda v, r: table[(v, r)], mcmc_sets, repeats,
                                 ctx.cfg.evaluation.kl_estimator)


def run_training_size_sweep(ctx: Context, sizes: Sequence[int], data: Dataset, tests: HeldOutSet,
                            mcmc_sets: Sequence[np.ndarray], variant: str = "dual-decoder",
                            jobs: int = 1, n_samples: int | None = None) -> list[SweepPoint]:
    sizes = [int(n) for n in sizes]
    if max(sizes) > len(data):
        raise ValueError(f"largest training size {max(sizes)} exceeds the dataset ({len(data)})")

    def one(n):
        model = train_model(ctx, variant, data.subset(n))
        return [s.kinetic for s in infer(ctx, model, tests.y, n_samples)]

    if jobs == 1:
        done = [one(n) for n in sizes]
    else:
        done = Parallel(n_jobs=jobs)(delayed(one)(n) for n in sizes)
    table = dict(zip(sizes, done))
    return sweep_training_size(sizes, lambda n: table[n], mcmc_sets, ctx.cfg.evaluation.kl_estimator)


def run_dvr_shift_sweep(ctx: Context, dvr_values: Sequence[float], model: CvaeModel, m: int | None = None,
                        jobs: int = 1, n_samples: int | None = None) -> list[SweepPoint]:
    m = ctx.cfg.evaluation.dvr_shift_n_test if m is None else m

    def compare(dvr):
        tests = shifted_test_set(ctx, dvr, m)
        chains = run_chains(ctx, tests.y, jobs, stream_tag=int(round(dvr * 1000)))
        dl = infer(ctx, model, tests.y, n_samples)
        return [c.samples.kinetic for c in chains], [s.kinetic for s in dl]

    return sweep_dvr_shift(list(dvr_values), compare, ctx.cfg.evaluation.kl_estimator)


# ---------------------------------------------------------------------------
# run directory bookkeeping


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


MANIFEST_NAME = "manifest.json"


def write_manifest(out_dir, command: str) -> Path:
    """List every file under out_dir (except the manifest) with its checksum."""
    out = Path(out_dir)
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST_NAME)
    entries = [{"path": p.relative_to(out).as_posix(), "sha256": sha256_file(p), "bytes": p.stat().st_size}
               for p in files]
    path = out / MANIFEST_NAME
    path.write_text(json.dumps({"command": command, "files": entries}, indent=2, sort_keys=True) + "\n")
    return path
