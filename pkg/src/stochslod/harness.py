"""Reference Monte Carlo solver, error metrics and experiment runs writing CSV."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, fem
from .field import FieldLaw, SeedScheme, sample_field, sample_field_lowdiscrepancy
from .grid import ConfigurationError, GridSpec, domain, project_p0
from .slod import (RieszError, SamplingConfig, assemble_coarse_solution, build_model,
                   compute_crb, process_pool, sigma_overall)

log = logging.getLogger(__name__)

ENV_PREFIX = "STOCHSLOD_"
RHS_KINDS = ("paper-default", "literal-sin", "constant-one", "custom-p0")
STUDIES = ("convergence", "sigma", "riesz")


# --- configuration ---------------------------------------------------------------

def _int_list(v):
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    return [int(x) for x in str(v).replace(" ", "").split(",") if x != ""]


def _float_list(v):
    if v is None or v == "":
        return None
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    return [float(x) for x in str(v).replace(" ", "").split(",") if x != ""]


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {v!r}")


def _opt_int(v):
    return None if v is None or str(v).strip() in ("", "none") else int(v)


def _opt_str(v):
    return None if v is None or str(v).strip() in ("", "none") else str(v)


@dataclass
class ExperimentConfig:
    d: int = 1
    log_H: list = field(default_factory=lambda: [3])
    log_eps: list = field(default_factory=lambda: [5])
    log_h: int = 9
    ell: list = field(default_factory=lambda: [3])
    M: int = 1000
    m_factor: int = 3
    p: float = 1.5
    r: float = 6.0
    threshold_floor: float = 1e-10
    objective: str = "minimize"
    gram_mode: str = "exact"
    reuse: str = "symmetry"
    alpha: float = 0.1
    beta: float = 1.0
    sampler: str = "pseudo"
    rhs: str = "paper-default"
    rhs_values: list | None = None
    M_reference: int | None = None
    seed: int = 0
    source_kind: str = "slod"
    common_random_numbers: bool = False
    allow_whole_domain: bool = False
    allow_H_equal_eps: bool = False
    workers: int = 1
    backend: str = "auto"
    output: str | None = None
    cache_dir: str | None = None
    include_wall_time: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.rhs not in RHS_KINDS:
            raise ConfigurationError(f"unknown rhs {self.rhs!r}")
        if self.rhs == "custom-p0" and not self.rhs_values:
            raise ConfigurationError("rhs=custom-p0 needs rhs_values")
        if self.source_kind not in ("slod", "lod"):
            raise ConfigurationError(f"unknown source kind {self.source_kind!r}")
        if self.backend not in ("auto",) + fem.BACKENDS:
            raise ConfigurationError(f"unknown backend {self.backend!r}")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if self.M_reference is not None and self.M_reference < 1:
            raise ConfigurationError("M_reference must be >= 1")
        self.sampling()
        self.law()

    def sampling(self) -> SamplingConfig:
        return SamplingConfig(self.M, self.m_factor, self.p, self.r, self.threshold_floor,
                              self.objective, self.gram_mode, self.reuse)

    def law(self) -> FieldLaw:
        return FieldLaw(self.alpha, self.beta, self.sampler)

    @property
    def m_reference(self) -> int:
        return self.M if self.M_reference is None else self.M_reference

    def digest(self) -> str:
        d = dataclasses.asdict(self)
        for k in ("workers", "output", "cache_dir", "backend", "include_wall_time"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_PARSERS = {
    "log_H": _int_list, "log_eps": _int_list, "ell": _int_list, "rhs_values": _float_list,
    "M_reference": _opt_int, "output": _opt_str, "cache_dir": _opt_str,
    "common_random_numbers": _bool, "allow_whole_domain": _bool, "allow_H_equal_eps": _bool,
    "include_wall_time": _bool,
}
CONFIG_KEYS = tuple(f.name for f in dataclasses.fields(ExperimentConfig))


def _parse_value(key: str, value):
    if key in _PARSERS:
        return _PARSERS[key](value)
    default = ExperimentConfig.__dataclass_fields__[key].default
    if isinstance(default, bool):
        return _bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value).strip()


def parse_config_text(text: str) -> dict:
    """Flat key=value lines, '#' comments; unknown keys are errors."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"line {n}: unknown key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):]
        match = [k for k in CONFIG_KEYS if k.lower() == key.lower()]
        if not match:
            raise ConfigurationError(f"unknown configuration variable {name}")
        out[match[0]] = _parse_value(match[0], value)
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> ExperimentConfig:
    """Defaults < file < environment < explicit overrides (CLI flags)."""
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    values.update(env_overrides(environ))
    for k, v in (overrides or {}).items():
        if k not in CONFIG_KEYS:
            raise ConfigurationError(f"unknown key {k!r}")
        if v is not None:
            values[k] = _parse_value(k, v) if isinstance(v, str) else v
    return ExperimentConfig(**values)


# --- right-hand sides --------------------------------------------------------------

def rhs_function(kind: str, d: int, values=None):
    """Source f on the unit box as a vectorized callable f(x_0, ..., x_{d-1})."""
    if kind == "paper-default":
        return lambda *x: 2 * math.pi ** 2 * np.prod([np.sin(math.pi * xi) for xi in x], axis=0)
    if kind == "literal-sin":
        return lambda *x: 2 * math.pi ** 2 * np.prod([np.sin(xi) for xi in x], axis=0)
    if kind == "constant-one":
        return lambda *x: np.ones(np.broadcast(*x).shape) if x else 1.0
    if kind == "custom-p0":
        vals = np.asarray(values, dtype=float).ravel()
        n = round(vals.size ** (1.0 / d))
        if n ** d != vals.size or n & (n - 1):
            raise ConfigurationError(f"{vals.size} values are not a dyadic grid in {d}D")
        grid = vals.reshape((n,) * d)

        def f(*x):
            idx = tuple(np.clip((np.asarray(xi) * n).astype(int), 0, n - 1) for xi in x)
            return grid[idx]
        return f
    raise ConfigurationError(f"unknown rhs kind {kind!r}")


# --- reference stream -------------------------------------------------------------

class ReferenceAccumulator:
    """Streamed first moment of Pi_H u_h and running means of the squared L2 norms of
    Pi_H u_h - ubar and Pi_H u_h (P0 values, flat)."""

    def __init__(self, ubar, element_volume: float):
        self.ubar = np.asarray(ubar, dtype=float).ravel().copy()
        self.volume = float(element_volume)
        self.count = 0
        self.mean = np.zeros_like(self.ubar)
        self.err2 = 0.0
        self.norm2 = 0.0

    def add(self, proj) -> None:
        proj = np.asarray(proj, dtype=float).ravel()
        self.count += 1
        k = self.count
        e = float(np.sum((proj - self.ubar) ** 2) * self.volume)
        s = float(np.sum(proj ** 2) * self.volume)
        self.mean += (proj - self.mean) / k
        self.err2 += (e - self.err2) / k
        self.norm2 += (s - self.norm2) / k


def relative_error(ubar, acc: ReferenceAccumulator) -> float:
    ubar = np.asarray(ubar, dtype=float).ravel()
    if not np.array_equal(ubar, acc.ubar):
        raise ValueError("the accumulator was built against a different ubar")
    if acc.count == 0:
        raise ValueError("empty accumulator")
    if not acc.norm2 > 0:
        raise ValueError("zero reference norm")
    return math.sqrt(acc.err2) / math.sqrt(acc.norm2)


def _reference_chunk(args):
    d, log_eps, log_h, law, seed, purpose, use_sobol, rhs, rhs_values, log_Hs, indices, backend = args
    if backend != "auto":
        fem.set_backend(backend)
    spec = GridSpec(d, 1, log_eps, log_h)
    region = domain(spec)
    plan = fem.AssemblyPlan(region.node_shape, spec.h, region.interior_nodes)
    load = fem.assemble_load_function(region, rhs_function(rhs, d, rhs_values))
    seeds = SeedScheme(seed)
    out = []
    for i in indices:
        if use_sobol:
            sample = sample_field_lowdiscrepancy(spec, law, i)
        else:
            sample = sample_field(spec, law, seeds, i, purpose=purpose)
        a = sample.fine_values().ravel()
        A = plan.matrix(a)
        x = plan.factor(a)(load)
        try:
            fem._residual_check(A, x, load, 1e-10, "reference solve")
        except fem.SolverError as exc:
            raise fem.SolverError(f"reference sample {i}: {exc}", residual=exc.residual) from exc
        u = np.zeros(int(np.prod(region.node_shape)))
        u[region.interior_nodes] = x
        u = u.reshape(region.node_shape)
        out.append([project_p0(u, 2 ** (log_h - lH)).ravel() for lH in log_Hs])
    return out


def reference_stream(config: ExperimentConfig, log_eps: int, targets: dict) -> dict:
    """Accumulators for every target {label: (log_H, ubar)} from M_reference global solves."""
    law = config.law()
    use_sobol = config.sampler == "sobol" and config.d == 1
    purpose = "coefficient" if config.common_random_numbers else "reference"
    labels = list(targets)
    log_Hs = [targets[k][0] for k in labels]
    accs = {k: ReferenceAccumulator(targets[k][1], 2.0 ** (-config.d * targets[k][0])) for k in labels}
    M = config.m_reference
    n_chunks = min(config.workers, M)
    bounds = np.linspace(0, M, n_chunks + 1).astype(int)
    args = [(config.d, log_eps, config.log_h, law, config.seed, purpose, use_sobol, config.rhs,
             config.rhs_values, log_Hs, list(range(bounds[j], bounds[j + 1])), config.backend)
            for j in range(n_chunks)]
    if n_chunks > 1:
        with process_pool(config.workers) as ex:
            chunks = list(ex.map(_reference_chunk, args))
    else:
        chunks = [_reference_chunk(a) for a in args]
    for chunk in chunks:  # sample order
        for projs in chunk:
            for k, proj in zip(labels, projs):
                accs[k].add(proj)
    return accs


# --- experiments -------------------------------------------------------------------

def fit_slope(rows, x_column: str, y_column: str) -> float:
    """Least-squares slope of log2(y) against log2(x)."""
    x = np.array([float(r[x_column]) for r in rows])
    y = np.array([float(r[y_column]) for r in rows])
    if x.size < 2:
        raise ValueError("need at least two rows")
    if np.any(~(x > 0)) or np.any(~(y > 0)):
        raise ValueError("log-log fit needs positive values")
    lx, ly = np.log2(x), np.log2(y)
    lx0 = lx - lx.mean()
    if not np.any(lx0):
        raise ValueError("x values are all equal")
    return float(lx0 @ (ly - ly.mean()) / (lx0 @ lx0))


def whole_domain_patch(d: int, log_H: int, ell: int) -> bool:
    return 2 ** log_H <= 2 * ell + 1


def combinations(config: ExperimentConfig) -> list[tuple[int, int, int]]:
    """Admissible (log_eps, log_H, ell) in canonical order."""
    out = []
    for le in config.log_eps:
        for lH in config.log_H:
            for ell in config.ell:
                if lH > le or (lH == le and not config.allow_H_equal_eps):
                    continue
                if whole_domain_patch(config.d, lH, ell) and not config.allow_whole_domain:
                    continue
                if not 1 <= lH <= le <= config.log_h:
                    raise ConfigurationError(f"invalid levels H=2^-{lH}, eps=2^-{le}, h=2^-{config.log_h}")
                out.append((le, lH, ell))
    return out


COLUMNS = ["d", "H", "eps", "ell", "M", "m", "p", "r", "seed", "sigma", "C_rb",
           "rel_error", "expansion_residual", "log"]


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def build_coarse_model(config: ExperimentConfig, log_H: int, log_eps: int, ell: int):
    spec = GridSpec(config.d, log_H, log_eps, config.log_h)
    return build_model(spec, ell, config.sampling(), config.law(), SeedScheme(config.seed),
                       source_kind=config.source_kind, workers=config.workers,
                       cache_dir=config.cache_dir,
                       common_random_numbers=config.common_random_numbers,
                       allow_whole_domain=config.allow_whole_domain)


def run_experiment(config: ExperimentConfig, study: str = "convergence") -> list[dict]:
    """One row per admissible combination; also writes CSV + sidecars if config.output is set."""
    if study not in STUDIES:
        raise ConfigurationError(f"unknown study {study!r}")
    if config.backend != "auto":
        fem.set_backend(config.backend)
    f = rhs_function(config.rhs, config.d, config.rhs_values)
    rows, timings = [], []
    combos = combinations(config)
    by_eps = {}
    for le, lH, ell in combos:
        by_eps.setdefault(le, []).append((lH, ell))
    for le, items in by_eps.items():
        pending = []
        for lH, ell in items:
            t0 = time.perf_counter()
            model = build_coarse_model(config, lH, le, ell)
            ubar, info = assemble_coarse_solution(model, f, return_details=True)
            crb = compute_crb(model)
            row = {
                "d": config.d, "H": 2.0 ** -lH, "eps": 2.0 ** -le, "ell": ell, "M": config.M,
                "m": config.m_factor * (2 * ell + 1) ** config.d, "p": float(config.p),
                "r": float(config.r), "seed": config.seed, "sigma": sigma_overall(model),
                "C_rb": crb, "rel_error": float("nan"),
                "expansion_residual": info["residual"] / info["rhs_norm"] if info["rhs_norm"] else 0.0,
                "log": "; ".join(model.warnings),
            }
            pending.append((lH, ubar, row, time.perf_counter() - t0))
        if study == "convergence" and pending:
            t0 = time.perf_counter()
            targets = {j: (lH, ubar) for j, (lH, ubar, _, _) in enumerate(pending)}
            accs = reference_stream(config, le, targets)
            t_ref = time.perf_counter() - t0
            for j, (_, ubar, row, _) in enumerate(pending):
                row["rel_error"] = relative_error(ubar, accs[j])
        else:
            t_ref = 0.0
        for _, _, row, t in pending:
            rows.append(row)
            timings.append(t + t_ref)
    if config.output:
        write_outputs(config, rows, timings, study)
    return rows


def rows_to_csv(rows, columns=COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def write_outputs(config: ExperimentConfig, rows, timings, study: str) -> None:
    out = Path(config.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    columns = COLUMNS + (["wall_time"] if config.include_wall_time else [])
    if config.include_wall_time:
        rows = [dict(r, wall_time=t) for r, t in zip(rows, timings)]
    out.write_text(rows_to_csv(rows, columns))
    meta = {
        "config_hash": config.digest(), "study": study, "objective": config.objective,
        "gram_mode": config.gram_mode, "reuse": config.reuse, "rhs": config.rhs,
        "source_kind": config.source_kind, "version": __version__,
    }
    out.with_name(out.name + ".meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    timing_rows = [{"H": r["H"], "eps": r["eps"], "ell": r["ell"], "wall_time": t}
                   for r, t in zip(rows, timings)]
    out.with_name(out.name + ".timing.csv").write_text(
        rows_to_csv(timing_rows, ["H", "eps", "ell", "wall_time"]))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


__all__ = [
    "ExperimentConfig", "ReferenceAccumulator", "RieszError", "combinations", "fit_slope",
    "load_config", "reference_stream", "relative_error", "rhs_function", "run_experiment",
]
