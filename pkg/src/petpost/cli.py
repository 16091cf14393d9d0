"""Command-line front end for simulation, reference MCMC, CVAE training, inference and evaluation.

Precedence of settings, lowest to highest: built-in defaults, the YAML file
given with --config, ``--set section.key=value`` overrides, then the
command-specific flags.  Every command writes its outputs into one run
directory together with the resolved config (config.yaml), a summary log
(run.log) and a checksum manifest (manifest.json).

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import pipeline
from .config import ConfigError, ExperimentConfig, set_path
from .cvae import VARIANTS, CvaeError, CvaeModel, TrainingDiverged
from .evaluation import write_sweep_csv
from .kinetics import KineticsError
from .mcmc import GEWEKE_THRESHOLD
from .priors import PriorError, load_dataset, read_samples_csv, save_dataset

log = logging.getLogger("petpost")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad arguments or inputs detected after parsing; maps to exit code 2."""


# ---------------------------------------------------------------------------
# argument helpers


def parse_grid(spec: str) -> list[float]:
    """``a:b:step`` (inclusive of b) or a comma-separated list."""
    spec = spec.strip()
    try:
        if ":" in spec:
            parts = [float(p) for p in spec.split(":")]
            if len(parts) != 3:
                raise ValueError
            start, stop, step = parts
            if step <= 0 or stop < start:
                raise ValueError
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + k * step, 12) for k in range(n)]
        values = [float(p) for p in spec.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"invalid grid {spec!r}; use start:stop:step or a comma list") from None
    if not values:
        raise UsageError("empty grid")
    return values


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _existing_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def _existing_dir(path: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"no such directory: {path}")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        set_path(cfg, key.strip(), yaml.safe_load(raw))
    if args.seed is not None:
        set_path(cfg, "seed", args.seed)
    return cfg


def _revalidate(cfg: ExperimentConfig) -> ExperimentConfig:
    return ExperimentConfig.from_dict(cfg.to_dict())


class RunDir:
    """Output directory with config echo, summary log and manifest."""

    def __init__(self, path, cfg: ExperimentConfig, command: str):
        self.path = Path(path)
        try:
            self.path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create output directory {path}: {exc}") from exc
        self.cfg = cfg
        self.command = command
        self.lines: list[str] = []
        cfg.dump(self.path / "config.yaml")

    def note(self, line: str) -> None:
        self.lines.append(line)

    def close(self, summary: str) -> None:
        # the log stays free of absolute paths so reruns elsewhere match byte for byte
        self.note(summary)
        (self.path / "run.log").write_text("\n".join(self.lines) + "\n")
        pipeline.write_manifest(self.path, self.command)
        print(f"{summary} [{self.path}]")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg: ExperimentConfig) -> None:
    if args.size < 1:
        raise UsageError("--size must be >= 1")
    ctx = pipeline.Context.from_config(cfg)
    run = RunDir(args.out, cfg, "simulate")
    if args.test:
        held = pipeline.held_out_set(ctx, args.size)
        path = run.path / "test.csv"
        save_dataset(held.as_dataset(ctx.prior, cfg.seed), path)
        run.close(f"simulate: {args.size} alpha-filtered test measurements -> {path.name}")
    else:
        ds = pipeline.training_set(ctx, args.size)
        path = run.path / "train.csv"
        save_dataset(ds, path)
        run.close(f"simulate: {args.size} training pairs (truncation acceptance "
                  f"{ds.truncation_acceptance:.3f}) -> {path.name}")


def _read_measurements(path) -> np.ndarray:
    try:
        _, _, y = read_samples_csv(_existing_file(path))
    except PriorError as exc:
        raise UsageError(str(exc)) from exc
    if len(y) == 0:
        raise UsageError(f"{path}: no measurements")
    return y


def cmd_mcmc(args, cfg: ExperimentConfig) -> None:
    if args.iterations is not None:
        set_path(cfg, "mcmc.n_iterations", args.iterations)
    if args.burn_in is not None:
        set_path(cfg, "mcmc.burn_in", args.burn_in)
    cfg = _revalidate(cfg)
    ys = _read_measurements(args.measurements)
    ctx = pipeline.Context.from_config(cfg)
    run = RunDir(args.out, cfg, "mcmc")
    chains = pipeline.run_chains(ctx, ys, args.jobs)
    pipeline.write_chains(chains, run.path, traces=not args.no_traces)
    passed = sum(c.geweke.passed() for c in chains)
    for c in chains:
        run.note(f"{c.samples.measurement_id}: acceptance {c.acceptance_rate:.3f}, "
                 f"geweke max |diff| {c.geweke.abs_difference[:3].max():.3g}")
    run.close(f"mcmc: {len(chains)} chains x {cfg.mcmc.n_retained} draws, "
              f"{passed}/{len(chains)} pass geweke < {GEWEKE_THRESHOLD}")


def cmd_train(args, cfg: ExperimentConfig) -> None:
    overrides = {"epochs": args.epochs, "beta": args.beta, "lam": args.lam}
    for key, value in overrides.items():
        if value is not None:
            set_path(cfg, f"train.{key}", value)
    cfg = _revalidate(cfg)
    data = load_dataset(_existing_file(args.data))
    ctx = pipeline.Context.from_config(cfg)
    run = RunDir(args.out, cfg, "train")
    model = pipeline.train_model(ctx, args.variant, data)
    path = run.path / f"model_{args.variant}.json"
    model.save(path, extra={"data": Path(args.data).name, "seed": cfg.seed})
    run.note(f"loss per epoch: first {model.loss_history[0]:.6g}, last {model.loss_history[-1]:.6g}")
    run.note(f"log-variance floor hits {model.clamp_events}, clipped gradient steps {model.clip_events}")
    run.close(f"train: {args.variant} on {len(data)} pairs, {len(model.loss_history)} epochs, "
              f"final loss {model.loss_history[-1]:.5g} -> {path.name}")


def _load_model(path) -> CvaeModel:
    try:
        return CvaeModel.load(_existing_file(path))
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{path}: not a model checkpoint ({exc})") from exc


def cmd_infer(args, cfg: ExperimentConfig) -> None:
    model = _load_model(args.model)
    if args.variant and args.variant != model.variant:
        raise UsageError(f"--variant {args.variant} does not match the checkpoint variant {model.variant}")
    if not model.trained:
        raise UsageError(f"{args.model}: model is not trained")
    ys = _read_measurements(args.measurements)
    if ys.shape[1] != model.arch.n_frames:
        raise UsageError(f"measurements have {ys.shape[1]} frames, model expects {model.arch.n_frames}")
    ctx = pipeline.Context.from_config(cfg)
    run = RunDir(args.out, cfg, "infer")
    start = time.perf_counter()
    samples = pipeline.infer(ctx, model, ys, args.samples)
    elapsed = time.perf_counter() - start
    pipeline.write_samples(samples, run.path)
    print(f"inference took {elapsed:.2f} s", file=sys.stderr)
    run.close(f"infer: cvae-{model.variant}, {len(samples)} measurements x {args.samples} draws")


def cmd_evaluate(args, cfg: ExperimentConfig) -> None:
    if args.kl_estimator:
        set_path(cfg, "evaluation.kl_estimator", args.kl_estimator)
    mcmc = pipeline.read_sample_dir(_existing_dir(args.mcmc_dir))
    if not mcmc:
        raise UsageError(f"{args.mcmc_dir}: no *_samples.csv files")
    dl = {}
    for d in args.dl_dir:
        sets = pipeline.read_sample_dir(_existing_dir(d))
        if not sets:
            raise UsageError(f"{d}: no *_samples.csv files")
        name = sets[0].source
        if name in dl:
            name = f"{name}:{Path(d).name}"
        dl[name] = sets
    try:
        report = pipeline.evaluate_dirs(mcmc, dl, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    run = RunDir(args.out, cfg, "evaluate")
    report.write_json(run.path / "report.json")
    report.write_csv(run.path / "report.csv")
    for name, m in report.methods.items():
        run.note(f"{name}: delta_mu {np.round(m.delta_mu, 4).tolist()} delta_sigma "
                 f"{np.round(m.delta_sigma, 4).tolist()} kl {np.round(m.kl, 4).tolist()}")
    dvr = ", ".join(f"{k} {v.delta_mu[0]:.3f}/{v.kl[0]:.3f}" for k, v in report.methods.items())
    run.close(f"evaluate: M={report.n_measurements}, DVR delta_mu/KL: {dvr}")


def _sweep_inputs(args, ctx, run):
    """Training data, held-out measurements and their MCMC sample sets."""
    data = load_dataset(_existing_file(args.data)) if args.data else pipeline.training_set(ctx)
    if args.measurements:
        params, sigmas, y = read_samples_csv(_existing_file(args.measurements))
        held = pipeline.HeldOutSet(params, y, sigmas)
    else:
        held = pipeline.held_out_set(ctx, args.n_test)
    if args.mcmc_dir:
        sets = pipeline.read_sample_dir(_existing_dir(args.mcmc_dir))
        if len(sets) != len(held):
            raise UsageError(f"{args.mcmc_dir} holds {len(sets)} sample sets for {len(held)} measurements")
        mcmc_sets = [s.kinetic for s in sets]
    else:
        chains = pipeline.run_chains(ctx, held.y, args.jobs)
        pipeline.write_chains(chains, run.path / "mcmc", traces=False)
        mcmc_sets = [c.samples.kinetic for c in chains]
    return data, held, mcmc_sets


def cmd_sweep(args, cfg: ExperimentConfig) -> None:
    grid = parse_grid(args.grid)
    variant = args.variant or "dual-decoder"
    if args.kind == "lambda" and variant != "dual-decoder":
        raise UsageError("--kind lambda applies to the dual-decoder variant only")
    if args.kind == "train-size":
        if any(v != int(v) or v < 1 for v in grid):
            raise UsageError("training sizes must be positive integers")
        grid = [int(v) for v in grid]
        if grid != sorted(grid):
            raise UsageError("training sizes must be ascending")
    if args.kind == "dvr-shift" and any(v <= 0 for v in grid):
        raise UsageError("DVR values must be positive")
    ctx = pipeline.Context.from_config(cfg)
    run = RunDir(args.out, cfg, f"sweep {args.kind}")
    if args.kind in ("beta", "lambda"):
        data, held, mcmc_sets = _sweep_inputs(args, ctx, run)
        points = pipeline.run_hyperparameter_sweep(ctx, args.kind, grid, variant, data, held, mcmc_sets,
                                                   args.repeats, args.jobs, args.samples)
    elif args.kind == "train-size":
        data, held, mcmc_sets = _sweep_inputs(args, ctx, run)
        if max(grid) > len(data):
            raise UsageError(f"largest training size {max(grid)} exceeds the dataset ({len(data)})")
        points = pipeline.run_training_size_sweep(ctx, grid, data, held, mcmc_sets, variant, args.jobs,
                                                  args.samples)
    else:
        if args.model:
            model = _load_model(args.model)
        else:
            data = load_dataset(_existing_file(args.data)) if args.data else pipeline.training_set(ctx)
            model = pipeline.train_model(ctx, variant, data)
        points = pipeline.run_dvr_shift_sweep(ctx, grid, model, args.n_test, args.jobs, args.samples)
    name = {"beta": "beta", "lambda": "lambda", "train-size": "train_size", "dvr-shift": "dvr"}[args.kind]
    write_sweep_csv(points, run.path / "sweep.csv", name)
    curve = ", ".join(f"{p.value:g}:{p.kl_mean[0]:.3f}" for p in points)
    run.close(f"sweep {args.kind}: {len(points)} grid points, DVR KL {curve} -> sweep.csv")


def cmd_run(args, cfg: ExperimentConfig) -> None:
    ctx_cfg = _revalidate(cfg)
    run = RunDir(args.out, ctx_cfg, "run")
    result = pipeline.run_experiment(ctx_cfg, run.path, args.jobs)
    for name, m in result.report.methods.items():
        run.note(f"{name}: delta_mu {np.round(m.delta_mu, 4).tolist()} kl {np.round(m.kl, 4).tolist()}")
    passed = sum(c.geweke.passed() for c in result.chains)
    run.close(f"run: {len(result.tests)} test measurements, {passed} chains pass geweke, "
              f"{len(result.models)} variants trained")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="petpost", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set mcmc.burn_in=2000 (repeatable)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--jobs", type=_positive_int, default=1, help="worker processes for parallel stages")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a training set or an alpha-filtered test set")
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--test", action="store_true", help="write alpha-filtered test measurements")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("mcmc", help="reference posterior per measurement")
    s.add_argument("--measurements", required=True, help="measurement CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=_positive_int)
    s.add_argument("--burn-in", type=int)
    s.add_argument("--no-traces", action="store_true", help="skip the full-trace CSV files")
    s.set_defaults(func=cmd_mcmc)

    s = sub.add_parser("train", help="train one CVAE variant")
    s.add_argument("--variant", choices=VARIANTS, required=True)
    s.add_argument("--data", required=True, help="training CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=_positive_int)
    s.add_argument("--beta", type=float)
    s.add_argument("--lam", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="sample a trained model's posterior for each measurement")
    s.add_argument("--model", required=True)
    s.add_argument("--measurements", required=True)
    s.add_argument("--samples", type=_positive_int, default=45_000)
    s.add_argument("--variant", choices=VARIANTS, help="expected variant; mismatch is an error")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", help="compare network posteriors with MCMC")
    s.add_argument("--mcmc-dir", required=True)
    s.add_argument("--dl-dir", required=True, nargs="+")
    s.add_argument("--kl-estimator", choices=("gaussian", "histogram"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="sensitivity sweeps")
    s.add_argument("--kind", choices=pipeline.SWEEP_KINDS, required=True)
    s.add_argument("--grid", required=True, help="start:stop:step or comma list")
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--data", help="training CSV (default: simulate from the config)")
    s.add_argument("--measurements", help="test CSV (default: simulate from the config)")
    s.add_argument("--mcmc-dir", help="MCMC samples matching --measurements (default: run MCMC)")
    s.add_argument("--model", help="trained checkpoint for --kind dvr-shift")
    s.add_argument("--n-test", type=_positive_int, help="test measurements per grid point")
    s.add_argument("--repeats", type=_positive_int)
    s.add_argument("--samples", type=_positive_int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("run", help="end-to-end: simulate, MCMC, train all variants, infer, evaluate")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _revalidate(resolve_config(args))
        args.func(args, cfg)
    except TrainingDiverged as exc:
        print(f"petpost {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, ConfigError, PriorError, KineticsError, CvaeError) as exc:
        print(f"petpost {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001  any other failure is a runtime error
        log.debug("failure", exc_info=True)
        print(f"petpost {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
