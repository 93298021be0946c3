"""Command-line harness: ``mfgp <command> [options]``.

Exit codes: 0 success, 1 configuration or usage error, 2 numerical failure,
3 I/O or input-file error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import benchmarks as bm
from . import files
from .baselines import AR1, NARGP
from .data import MultiFidelityDataset, Scaling
from .diff import ParamVector
from .dpp import build_l, sample_kdpp
from .errors import (ConfigError, DigestMismatch, InfeasibleCardinality, MfgpError,
                     SchemaError, UnknownFidelity, UnknownLevel)
from .mfdgp import MFDGP, MfdgpConfig, MiniBatchSpec, TrainingSchedule

logger = logging.getLogger("mfgp")

CONFIG_VERSION = 1
MODELS = ("ar1", "nargp", "mfdgp")
BENCHMARK_COLUMNS = ["function", "model", "seed", "r2", "rmse", "mnll", "wall_seconds", "error"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

# accepted keys; anything else is rejected with its line number
TOP_KEYS = {
    "config_version", "functions", "allocations", "models", "model", "seeds",
    "test_points", "test_seed", "timing", "high_bounds", "schedule", "mfdgp", "ar1",
    "nargp", "design", "predict",
}
SECTION_KEYS = {
    "schedule": {"phase1_steps", "phase2_steps", "lr1", "lr2", "trace_every"},
    "mfdgp": {"num_inducing", "samples_train", "samples_predict", "jitter", "ard",
              "use_linear", "log_noise", "q_sqrt_scale", "batch"},
    "ar1": {"steps", "lr"},
    "nargp": {"steps_frozen", "steps_joint", "lr", "samples"},
    "design": {"k", "samples"},
    "predict": {"samples"},
}


# ------------------------------------------------------------------ config

@dataclass
class ExperimentConfig:
    raw: dict
    lines: dict = field(default_factory=dict)

    def get(self, section: str | None, key: str, default=None):
        node = self.raw if section is None else self.raw.get(section, {}) or {}
        return node.get(key, default)

    def error(self, path: str, message: str) -> ConfigError:
        line = self.lines.get(path)
        where = f"line {line}: " if line else ""
        return ConfigError(f"{where}field '{path}': {message}")

    # typed accessors ---------------------------------------------------
    def functions(self) -> list[str]:
        fns = self.raw.get("functions")
        if isinstance(fns, str):
            fns = [fns]
        if not fns:
            raise self.error("functions", "at least one function id is required")
        for f in fns:
            if f not in bm.FUNCTIONS:
                raise self.error("functions", f"unknown function id {f!r}")
        return list(fns)

    def allocation(self, fid: str) -> tuple[int, ...]:
        alloc = (self.raw.get("allocations") or {}).get(fid, bm.DEFAULT_ALLOCATIONS[fid])
        levels = bm.FUNCTIONS[fid].levels
        if (not isinstance(alloc, (list, tuple)) or len(alloc) != levels
                or not all(isinstance(n, int) and n >= 1 for n in alloc)):
            raise self.error(f"allocations.{fid}", f"expected {levels} positive integers")
        return tuple(alloc)

    def seeds(self, override: int | None) -> list[int]:
        if override is not None:
            return [override]
        seeds = self.raw.get("seeds", [0])
        if isinstance(seeds, int):
            seeds = [seeds]
        if not seeds or not all(isinstance(s, int) for s in seeds):
            raise self.error("seeds", "a non-empty list of integers is required")
        return list(seeds)

    def models(self) -> list[str]:
        ms = self.raw.get("models", list(MODELS))
        if isinstance(ms, str):
            ms = [ms]
        for m in ms:
            if m not in MODELS:
                raise self.error("models", f"unknown model {m!r}")
        return list(ms)

    def model(self) -> str:
        m = self.raw.get("model", "mfdgp")
        if m not in MODELS:
            raise self.error("model", f"unknown model {m!r}")
        return m

    def schedule(self) -> TrainingSchedule:
        try:
            return TrainingSchedule(**(self.raw.get("schedule") or {}))
        except (TypeError, ConfigError) as exc:
            raise self.error("schedule", str(exc)) from None

    def mfdgp_config(self, seed: int) -> MfdgpConfig:
        sec = dict(self.raw.get("mfdgp") or {})
        sec.pop("batch", None)
        if isinstance(sec.get("num_inducing"), list):
            sec["num_inducing"] = tuple(sec["num_inducing"])
        try:
            return MfdgpConfig(seed=seed, **sec)
        except TypeError as exc:
            raise self.error("mfdgp", str(exc)) from None

    def batch_spec(self) -> MiniBatchSpec:
        batch = self.get("mfdgp", "batch")
        if batch is None:
            return MiniBatchSpec.full()
        if not isinstance(batch, list):
            raise self.error("mfdgp.batch", "expected a list with one entry per level (null = all)")
        return MiniBatchSpec(tuple(batch))


def _line_map(text: str) -> dict:
    """Dotted key path -> 1-based source line, for error messages."""
    lines: dict[str, int] = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                lines[path] = k.start_mark.line + 1
                walk(v, path)

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return lines


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark else ""
        raise ConfigError(f"{where}invalid YAML ({exc.__class__.__name__})") from None
    return parse_config(raw if raw is not None else {}, _line_map(text))


def parse_config(raw: Any, lines: dict | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig(raw if isinstance(raw, dict) else {}, lines or {})
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    if raw.get("config_version") != CONFIG_VERSION:
        raise cfg.error("config_version", f"must be {CONFIG_VERSION}")
    for key in raw:
        if key not in TOP_KEYS:
            raise cfg.error(key, "unknown key")
    for section, keys in SECTION_KEYS.items():
        sec = raw.get(section)
        if sec is None:
            continue
        if not isinstance(sec, dict):
            raise cfg.error(section, "expected a mapping")
        for key in sec:
            if key not in keys:
                raise cfg.error(f"{section}.{key}", "unknown key")
    return cfg


# ----------------------------------------------------------------- models

@dataclass
class Fitted:
    kind: str
    model: Any
    trace: list


def fit_model(kind: str, data: MultiFidelityDataset, cfg: ExperimentConfig, seed: int) -> Fitted:
    if kind == "mfdgp":
        model = MFDGP(data, cfg.mfdgp_config(seed))
        result = model.train(cfg.schedule(), cfg.batch_spec(), seed)
        trace = [(r["step"], r["phase"], r["lr"], r["objective"]) for r in result.trace]
        return Fitted(kind, model, trace)
    if kind == "ar1":
        steps, lr = cfg.get("ar1", "steps", 1500), cfg.get("ar1", "lr", 0.01)
        model = AR1(data).fit(steps, lr)
        trace = [(i, "joint", lr, float(v)) for i, v in enumerate(model.trace) if i % 100 == 0]
        return Fitted(kind, model, trace)
    steps_f = cfg.get("nargp", "steps_frozen", 1000)
    steps_j = cfg.get("nargp", "steps_joint", 1000)
    lr = cfg.get("nargp", "lr", 0.01)
    model = NARGP(data, samples=cfg.get("nargp", "samples", 1000)).fit(steps_f, steps_j, lr)
    trace, offset = [], 0
    for t, (first, second) in enumerate(model.traces, start=1):
        for label, vals in (("fixed-noise", first), ("joint", second)):
            trace += [(offset + i, f"level{t}.{label}", lr, float(v))
                      for i, v in enumerate(vals) if i % 100 == 0]
            offset += len(vals)
    return Fitted(kind, model, trace)


def predict_moments(fitted: Fitted, x, level: int | None, samples: int | None, seed: int):
    """Predictive mean and latent variance (1-D arrays) in data units."""
    m = fitted.model
    if fitted.kind == "mfdgp":
        _, mean, var = m.predict(x, level, samples, seed)
        return mean[:, 0], var[:, 0]
    if fitted.kind == "ar1":
        return m.predict(x, level)
    pred = m.predict(x, level, samples, seed)
    return pred.mean, pred.var


def log_density(fitted: Fitted, x, y, samples: int | None, seed: int):
    m = fitted.model
    if fitted.kind == "ar1":
        return m.log_density(x, y)
    return m.log_density(x, y, s=samples, seed=seed)


def checkpoint_payload(fitted: Fitted, data: MultiFidelityDataset, cfg: ExperimentConfig,
                       seed: int) -> dict:
    m = fitted.model
    payload = {
        "model": fitted.kind,
        "seed": seed,
        "config": cfg.raw,
        "config_digest": files.config_digest(cfg.raw),
        "dataset_digest": files.dataset_digest(data),
        "dataset": files.dataset_text(data),
        "scaling": m.scaling.to_dict(),
    }
    if fitted.kind == "nargp":
        payload["segments"] = [
            {k: v.tolist() for k, v in gp.params.as_dict().items()} for gp in m.models]
    else:
        payload["segments"] = {k: v.tolist() for k, v in m.params.as_dict().items()}
    if fitted.kind == "mfdgp":
        payload["fixed_z"] = {str(l): z.tolist() for l, z in m.fixed_z.items()}
    return payload


def restore(payload: dict) -> tuple[Fitted, MultiFidelityDataset]:
    data = files.parse_dataset(payload["dataset"], "checkpoint dataset")
    cfg = parse_config(payload["config"])
    scaling = Scaling.from_dict(payload["scaling"])
    kind, seed = payload["model"], payload["seed"]
    if kind == "mfdgp":
        model = MFDGP(data, cfg.mfdgp_config(seed), scaling=scaling)
        for l, z in payload["fixed_z"].items():
            model.fixed_z[int(l)] = np.asarray(z, dtype=np.float64)
        model.params = ParamVector(model.layout.pack(payload["segments"]), model.layout)
    elif kind == "ar1":
        model = AR1(data, scaling=scaling)
        model.set_params(model.layout.pack(payload["segments"]))
    else:
        model = NARGP(data, samples=cfg.get("nargp", "samples", 1000), scaling=scaling)
        model.models = []
        for t, seg in enumerate(payload["segments"], start=1):
            gp = model._level_gp(t)  # needs the already restored lower levels
            gp.set_params(gp.layout.pack(seg))
            model.models.append(gp)
    return Fitted(kind, model, []), data


# --------------------------------------------------------------- commands

def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(args, name: str):
    value = getattr(args, name)
    if value is None:
        raise ConfigError(f"--{name.replace('_', '-')} is required for '{args.command}'")
    return value


def _high_bounds(cfg: ExperimentConfig, fid: str):
    hb = (cfg.raw.get("high_bounds") or {}).get(fid)
    if hb is None:
        return None
    if not (isinstance(hb, list) and len(hb) == 2):
        raise cfg.error(f"high_bounds.{fid}", "expected [lower list, upper list]")
    return hb


def dataset_name(fid: str, alloc, seed: int) -> str:
    return f"{fid}_{'-'.join(str(n) for n in alloc)}_seed{seed}.csv"


def cmd_generate(args) -> int:
    cfg = load_config(_require(args, "config"))
    out = _out_dir(args)
    n_test = cfg.raw.get("test_points", 1000)
    test_seed = cfg.raw.get("test_seed", 0)
    scale_rows = []
    for fid in cfg.functions():
        alloc = cfg.allocation(fid)
        for seed in cfg.seeds(args.seed):
            gen = bm.generate_dataset(fid, alloc, seed, _high_bounds(cfg, fid))
            files.write_dataset(out / dataset_name(fid, alloc, seed), gen.data)
            scale_rows.append([fid, "-".join(map(str, alloc)), seed, gen.y_scale])
        x, y = bm.test_grid(fid, n_test, test_seed)
        d = x.shape[1]
        files.write_table(out / f"{fid}_test.csv", [f"x_{j + 1}" for j in range(d)] + ["y"],
                          [[*xi.tolist(), yi] for xi, yi in zip(x, y)])
    files.write_table(out / "scales.csv", ["function", "allocation", "seed", "y_scale"], scale_rows)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(_require(args, "config"))
    data = files.read_dataset(_require(args, "data"))
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else cfg.seeds(None)[0]
    fitted = fit_model(cfg.model(), data, cfg, seed)
    files.write_checkpoint(out / "checkpoint.json", checkpoint_payload(fitted, data, cfg, seed))
    files.write_table(out / "trace.csv", ["step", "phase", "lr", "objective"], fitted.trace)
    return EXIT_OK


def _load_checked(args):
    payload = files.read_checkpoint(_require(args, "checkpoint"))
    fitted, data = restore(payload)
    if args.data is not None:
        files.check_digest(payload, files.read_dataset(args.data))
    return fitted, payload


def cmd_predict(args) -> int:
    fitted, payload = _load_checked(args)
    x = files.read_points(_require(args, "grid"))
    cfg = parse_config(payload["config"])
    samples = args.samples if args.samples is not None else cfg.get("predict", "samples")
    seed = args.seed if args.seed is not None else 0
    mean, var = predict_moments(fitted, x, args.level, samples, seed)
    sd = np.sqrt(np.maximum(var, 0.0))
    d = x.shape[1]
    header = [f"x_{j + 1}" for j in range(d)] + ["mean", "variance", "lower95", "upper95"]
    rows = [[*xi.tolist(), m, v, m - 1.96 * s, m + 1.96 * s]
            for xi, m, v, s in zip(x, mean, var, sd)]
    out = Path(args.out) if args.out else Path("predictions.csv")
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "predictions.csv"
    files.write_table(out, header, rows)
    return EXIT_OK


def cmd_design(args) -> int:
    fitted, payload = _load_checked(args)
    if fitted.kind != "mfdgp":
        raise ConfigError("design needs an mfdgp checkpoint")
    x = files.read_points(_require(args, "candidates"))
    cfg = parse_config(payload["config"])
    k = args.k if args.k is not None else cfg.get("design", "k", 50)
    if not isinstance(k, int) or not 1 <= k <= x.shape[0]:
        raise InfeasibleCardinality(f"k={k} must lie in 1..{x.shape[0]}")
    samples = args.samples if args.samples is not None else cfg.get("design", "samples")
    seed = args.seed if args.seed is not None else 0
    mean, cov = fitted.model.predict_cov(x, args.level, samples, seed)
    chosen = sample_kdpp(build_l(mean, cov, x), k, seed)
    d = x.shape[1]
    header = ["index"] + [f"x_{j + 1}" for j in range(d)] + ["mean", "variance"]
    rows = [[int(i), *x[i].tolist(), mean[i], cov[i, i]] for i in chosen]
    out = _out_dir(args)
    files.write_table(out / "design.csv", header, rows)
    return EXIT_OK


def run_cell(fid, kind, seed, cfg: ExperimentConfig, test_x, test_y_raw):
    gen = bm.generate_dataset(fid, cfg.allocation(fid), seed, _high_bounds(cfg, fid))
    y = test_y_raw / gen.y_scale
    fitted = fit_model(kind, gen.data, cfg, seed)
    samples = cfg.get("predict", "samples")
    mean, _ = predict_moments(fitted, test_x, None, samples, seed)
    return bm.metrics(mean, lambda t: log_density(fitted, test_x, t, samples, seed), y)


def benchmark_rows(cfg: ExperimentConfig, seed_override: int | None = None) -> list[list]:
    timing = bool(cfg.raw.get("timing", False))
    n_test, test_seed = cfg.raw.get("test_points", 1000), cfg.raw.get("test_seed", 0)
    rows = []
    for fid in cfg.functions():
        test_x, test_y = bm.test_grid(fid, n_test, test_seed)
        for kind in cfg.models():
            done = []
            for seed in cfg.seeds(seed_override):
                start = time.perf_counter()
                try:
                    rec = run_cell(fid, kind, seed, cfg, test_x, test_y)
                    vals, err = [rec.r2, rec.rmse, rec.mnll], ""
                    done.append(vals)
                except (MfgpError, ArithmeticError, np.linalg.LinAlgError) as exc:
                    vals, err = [None, None, None], f"{exc.__class__.__name__}: {exc}"
                    logger.warning("%s/%s/seed %d failed: %s", fid, kind, seed, err)
                wall = time.perf_counter() - start if timing else None
                rows.append([fid, kind, seed, *vals, wall, err])
            if done:
                mean = np.mean(np.array(done), axis=0).tolist()
                n_fail = len(cfg.seeds(seed_override)) - len(done)
                note = f"{n_fail} failed run(s) excluded" if n_fail else ""
                rows.append([fid, kind, "mean", *mean, None, note])
            else:
                rows.append([fid, kind, "mean", None, None, None, None, "all runs failed"])
    return rows


def cmd_benchmark(args) -> int:
    cfg = load_config(_require(args, "config"))
    out = _out_dir(args)
    rows = benchmark_rows(cfg, args.seed)
    files.write_table(out / "results.csv", BENCHMARK_COLUMNS, rows)
    return EXIT_OK


def gradient_checks(seed: int = 0) -> dict:
    """The three gradient gates: exact GP, AR1 and MF-DGP ELBO objectives."""
    import jax

    from .diff import check_grad
    from .gp_exact import ExactGP

    rng = np.random.default_rng(seed)
    reports = {}
    x = rng.uniform(size=(10, 1))
    gp = ExactGP(x, np.sin(6 * x[:, 0]))
    theta = gp.params.values + rng.normal(scale=0.3, size=gp.layout.size)
    reports["exact-gp nlml"] = check_grad(gp.objective(), theta)

    gen = bm.generate_dataset("linear-a", (8, 4), seed)
    ar1 = AR1(gen.data)
    theta = ar1.params.values + rng.normal(scale=0.3, size=ar1.layout.size)
    reports["ar1 nlml"] = check_grad(ar1.objective(), theta)

    gen = bm.generate_dataset("linear-a", (10, 5), seed)
    model = MFDGP(gen.data, MfdgpConfig(num_inducing=5, samples_train=3, seed=seed))
    eps = model.draw_eps(jax.random.PRNGKey(seed), gen.data.counts, 3)
    theta = model.params.values.copy()
    for name in model.layout.names:
        if name.endswith("q_sqrt"):
            s = model.layout[name]
            theta[s.offset:s.stop] = rng.normal(scale=0.3, size=s.size)
    theta = theta + rng.normal(scale=0.05, size=theta.size)
    reports["mfdgp elbo"] = check_grad(lambda th: -model.elbo(th, eps=eps), theta)
    return reports


def cmd_check_grad(args) -> int:
    reports = gradient_checks(args.seed if args.seed is not None else 0)
    for name, rep in reports.items():
        print(f"{name}: {rep}")
    return EXIT_OK if all(r.passed for r in reports.values()) else EXIT_NUMERIC


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "predict": cmd_predict,
    "benchmark": cmd_benchmark,
    "design": cmd_design,
    "check-grad": cmd_check_grad,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfgp", description="Multi-fidelity GP toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (predict also accepts a .csv path)")
        p.add_argument("--level", type=int, help="fidelity level to predict (default: highest)")
        p.add_argument("--samples", type=int, help="Monte-Carlo sample count")
        p.add_argument("--data", help="dataset CSV (train input; digest check elsewhere)")
        p.add_argument("--checkpoint", help="checkpoint written by 'train'")
        p.add_argument("--grid", help="CSV of prediction inputs")
        p.add_argument("--candidates", help="CSV of candidate inputs for 'design'")
        p.add_argument("--k", type=int, help="number of design points")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DigestMismatch, UnknownFidelity, UnknownLevel,
            InfeasibleCardinality) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MfgpError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
