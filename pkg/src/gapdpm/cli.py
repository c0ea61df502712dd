"""Command-line front end: simulate, fit, summarize, predict, diagnose.

Exit codes are 0 on success, 2 for usage or validation errors and 3 when
the sampler hits a numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__, simgen
from .data import CovariateCodec, DataError, GapTimeDataset, load_csv, write_csv
from .model import DependenceSpec, Hyperparameters, ModelConfig, ModelError
from .sampler import SamplerConfig, SamplerError, run_chains
from .store import DrawStore
from .summaries import (SummaryError, diagnostics, empirical_mode_profile,
                        predictive_gap_trajectory, summarize, write_tables)

log = logging.getLogger("gapdpm")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
OUT_ENV = "GAPDPM_OUT"
DEFAULT_OUT_ROOT = "gapdpm-runs"


class ConfigError(ValueError):
    """Invalid run configuration."""


# ------------------------------------------------------------------ config

@dataclass
class RunConfig:
    data: str | None = None
    scenario: str | None = None
    scenario_seed: int = 0
    dependence: DependenceSpec = field(default_factory=DependenceSpec)
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    scale_prior: str = "uniform"
    shared_beta: bool = False
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    covariates: CovariateCodec = field(default_factory=CovariateCodec)
    out: str | None = None

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.dependence, self.hyper, self.scale_prior, self.shared_beta)

    @classmethod
    def from_mapping(cls, raw: dict | None, base_dir: Path | None = None) -> "RunConfig":
        raw = dict(raw or {})
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            cfg = cls(
                data=raw.get("data"),
                scenario=None if raw.get("scenario") is None else str(raw["scenario"]),
                scenario_seed=int(raw.get("scenario_seed", 0)),
                dependence=DependenceSpec(**(raw.get("dependence") or {})),
                hyper=Hyperparameters(**(raw.get("hyper") or {})),
                scale_prior=raw.get("scale_prior", "uniform"),
                shared_beta=bool(raw.get("shared_beta", False)),
                sampler=SamplerConfig(**(raw.get("sampler") or {})),
                covariates=CovariateCodec.from_config(raw.get("covariates")),
                out=raw.get("out"),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        if cfg.data is not None and base_dir is not None and not Path(cfg.data).is_absolute():
            cfg.data = str(base_dir / cfg.data)
        return cfg

    def validate(self) -> None:
        if (self.data is None) == (self.scenario is None):
            raise ConfigError("exactly one of 'data' and 'scenario' must be given")
        if self.scenario is not None and self.scenario not in simgen.SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.data is not None and not Path(self.data).is_file():
            raise ConfigError(f"data file not found: {self.data}")
        self.model  # runs the model-level checks

    def to_mapping(self) -> dict:
        return {
            "data": self.data, "scenario": self.scenario, "scenario_seed": self.scenario_seed,
            "dependence": self.dependence.to_dict(),
            "hyper": asdict(self.hyper),
            "scale_prior": self.scale_prior, "shared_beta": self.shared_beta,
            "sampler": asdict(self.sampler),
            "covariates": self.covariates.to_config(),
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_mapping(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def load_dataset(self) -> GapTimeDataset:
        if self.scenario is not None:
            return simgen.generate(simgen.SCENARIOS[self.scenario](self.scenario_seed))
        return load_csv(self.data, self.covariates)


def read_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_mapping(raw, base_dir=path.parent)


# --------------------------------------------------------------- manifest

def version_string() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5)
        if res.returncode == 0 and res.stdout.strip():
            return f"{__version__}+{res.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(directory: Path, command: str, seed, config: dict, wall_time: float,
                   **extra) -> Path:
    blob = json.dumps(config, sort_keys=True).encode()
    manifest = {
        "command": command, "version": version_string(), "seed": seed, "config": config,
        "config_hash": hashlib.sha256(blob).hexdigest(), "wall_time_s": round(wall_time, 3),
        **extra,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT_ROOT))


def _out_dir(arg: str | None, default_name: str) -> Path:
    d = Path(arg) if arg else out_root() / default_name
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {d}: {exc}") from None
    if not os.access(d, os.W_OK):
        raise ConfigError(f"output directory not writable: {d}")
    return d


# ---------------------------------------------------------------- stores

def load_stores(path) -> list[DrawStore]:
    """Stores of a fit directory (``chain*/`` subdirectories) or a single store."""
    d = Path(path)
    if not d.is_dir():
        raise ConfigError(f"not a directory: {d}")
    if (d / "meta.json").exists():
        return [DrawStore.load(d)]
    chains = sorted(p for p in d.glob("chain*") if (p / "meta.json").exists())
    if not chains:
        raise ConfigError(f"{d}: no draw store found")
    return [DrawStore.load(p) for p in chains]


# --------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    if args.scenario not in simgen.SCENARIOS:
        raise ConfigError(f"unknown scenario {args.scenario!r}; choose from "
                          f"{', '.join(sorted(simgen.SCENARIOS))}")
    seed = 0 if args.seed is None else args.seed
    t0 = time.perf_counter()
    spec = simgen.SCENARIOS[args.scenario](seed)
    out = _out_dir(args.out, f"scenario{args.scenario}-seed{seed}")
    write_csv(simgen.generate(spec), out / "data.csv")
    write_manifest(out, "simulate", seed, {"scenario": args.scenario, "spec": spec.digest()},
                   time.perf_counter() - t0, outputs=["data.csv"])
    print(out / "data.csv")
    return EXIT_OK


def resolve_fit_config(args) -> RunConfig:
    cfg = read_config(args.config) if args.config else RunConfig()
    if args.data:
        cfg.data, cfg.scenario = args.data, None
    if args.scenario:
        cfg.scenario, cfg.data = args.scenario, None
    overrides = {}
    if args.paper_scale:
        scaled = SamplerConfig.paper_scale()
        overrides.update(iterations=scaled.iterations, burn_in=scaled.burn_in, thin=scaled.thin)
    for key in ("iterations", "burn_in", "thin", "seed", "chains"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if overrides:
        cfg.sampler = replace(cfg.sampler, **overrides)
    if args.out:
        cfg.out = args.out
    cfg.validate()
    return cfg


def cmd_fit(args) -> int:
    cfg = resolve_fit_config(args)
    dataset = cfg.load_dataset()
    out = _out_dir(cfg.out, f"fit-{cfg.digest()[:12]}")
    t0 = time.perf_counter()
    stores = run_chains(dataset, cfg.model, cfg.sampler)
    wall = time.perf_counter() - t0
    outputs = []
    for k, store in enumerate(stores):
        store.save(out / f"chain{k}")
        outputs.append(f"chain{k}")
    pooled = DrawStore.concat(stores)
    summary = summarize(pooled) if pooled.n_draws else None
    if summary is not None:
        write_tables(pooled, out, summary)
        outputs += ["summary.json", "k_hist.csv", "p_hist.csv", "beta_ci.csv",
                    "atom_density.csv"]
    write_manifest(out, "fit", cfg.sampler.seed, cfg.to_mapping(), wall, outputs=outputs,
                   n_subjects=dataset.N, draws_per_chain=[s.n_draws for s in stores])
    print(out)
    return EXIT_OK


def cmd_summarize(args) -> int:
    stores = load_stores(args.store)
    pooled = DrawStore.concat(stores)
    if pooled.n_draws == 0:
        raise SummaryError(f"{args.store}: store holds no draws")
    out = Path(args.out) if args.out else Path(args.store)
    write_tables(pooled, _out_dir(str(out), ""))
    print(out / "summary.json")
    return EXIT_OK


def _read_profile(args, store: DrawStore, horizon: int) -> np.ndarray:
    if store.q == 0:
        return np.zeros((horizon, 0))
    if args.covariates:
        vals = [float(v) for v in args.covariates.split(",")]
        if len(vals) != store.q:
            raise ConfigError(f"--covariates needs {store.q} values "
                              f"({', '.join(store.covariate_names)})")
        return np.tile(vals, (horizon, 1))
    if args.profile:
        rows = np.loadtxt(args.profile, delimiter=",", ndmin=2)
        if rows.shape == (1, store.q):
            rows = np.tile(rows, (horizon, 1))
        if rows.shape[0] < horizon or rows.shape[1] != store.q:
            raise ConfigError(f"profile must be {horizon} x {store.q}, got {rows.shape}")
        return rows[:horizon]
    if args.data:
        cfg = read_config(args.config) if args.config else RunConfig()
        dataset = load_csv(args.data, cfg.covariates)
        if tuple(dataset.covariate_names) != tuple(store.covariate_names):
            raise ConfigError("data covariates do not match the fitted model")
        return empirical_mode_profile(dataset)[:horizon]
    raise ConfigError("model has covariates: give --covariates, --profile or --data")


def cmd_predict(args) -> int:
    stores = load_stores(args.store)
    pooled = DrawStore.concat(stores)
    horizon = pooled.J if args.horizon is None else args.horizon
    if horizon > pooled.J:
        raise SummaryError(f"horizon {horizon} exceeds the {pooled.J} gap positions of the fit")
    profile = _read_profile(args, pooled, horizon)
    seed = 0 if args.seed is None else args.seed
    t0 = time.perf_counter()
    Y = predictive_gap_trajectory(pooled, profile, horizon, seed=seed)
    out = _out_dir(args.out or str(Path(args.store) / "predict"), "")
    with (out / "predictive.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("draw", "gap", "log_gap"))
        for i in range(Y.shape[0]):
            for j in range(horizon):
                w.writerow((i, j + 1, repr(float(Y[i, j]))))
    write_manifest(out, "predict", seed, {"store": str(args.store), "horizon": horizon,
                                          "profile": profile.tolist()},
                   time.perf_counter() - t0, outputs=["predictive.csv"])
    print(out / "predictive.csv")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    stores = load_stores(args.store)
    res = {k: asdict(v) for k, v in diagnostics(stores).items()}
    out = Path(args.out) if args.out else Path(args.store)
    out = _out_dir(str(out), "")
    (out / "diagnostics.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    for name, d in res.items():
        flag = "  FLAG" if d["flagged"] else ""
        ess = "n/a" if d["ess"] is None else f"{d['ess']:.0f}"
        z = "n/a" if d["geweke_z"] is None else f"{d['geweke_z']:+.2f}"
        rhat = "n/a" if d["rhat"] is None else f"{d['rhat']:.3f}"
        print(f"{name:8s} ess={ess:>7s} geweke={z:>6s} rhat={rhat:>6s}{flag}")
    return EXIT_OK


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gapdpm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic scenario as CSV")
    p.add_argument("--scenario", required=True, help="scenario name (1 or 2)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the sampler")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--data", help="gap-time CSV (overrides config)")
    p.add_argument("--scenario", help="fit a built-in scenario instead of a CSV")
    p.add_argument("--seed", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--paper-scale", action="store_true",
                   help="251000 iterations, 1000 burn-in, thin 50")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("summarize", help="JSON summary and CSV tables of a fit")
    p.add_argument("store")
    p.add_argument("--out")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("predict", help="predictive log gaps of a new subject")
    p.add_argument("store")
    p.add_argument("--horizon", type=int)
    p.add_argument("--covariates", help="comma-separated covariate row used for every gap")
    p.add_argument("--profile", help="CSV with one covariate row per gap")
    p.add_argument("--data", help="CSV whose empirical-mode profile is used")
    p.add_argument("--config", help="config carrying the covariate codec for --data")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("diagnose", help="ESS, Geweke z and R-hat per scalar")
    p.add_argument("store")
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SamplerError as exc:
        print(f"gapdpm: numerical failure in block {exc.block}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, ModelError, SummaryError, FileNotFoundError,
            ValueError) as exc:
        print(f"gapdpm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
