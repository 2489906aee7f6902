"""Command line interface: ``stochslod <subcommand> [--config FILE] [--key value ...]``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import __version__
from .grid import ConfigurationError
from .harness import (CONFIG_KEYS, ExperimentConfig, build_coarse_model, combinations,
                      load_config, rhs_function, rows_to_csv, run_experiment)
from .slod import RieszError, assemble_coarse_solution

STUDY_OF = {"sigma-study": "sigma", "riesz-study": "riesz", "convergence": "convergence"}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value configuration file")
    for f in dataclasses.fields(ExperimentConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                       metavar="VALUE", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stochslod",
        description="Stochastic super-localized numerical homogenization experiments. "
        "Every configuration key can be given as --key-with-dashes VALUE, as "
        "STOCHSLOD_KEY in the environment or in a --config file. Keys: " + ", ".join(CONFIG_KEYS),
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("basis", "build (and cache) the coarse model of every admissible combination"),
        ("solve", "assemble the coarse solution and write its element values"),
        ("sigma-study", "sigma and C_rb per combination"),
        ("riesz-study", "C_rb and sigma per combination"),
        ("convergence", "full report including the relative L2 error"),
    ]:
        p = sub.add_parser(name, help=help_)
        _add_config_args(p)
    sub.add_parser("selftest", help="run the built-in oracle checks")
    return parser


def _config(args) -> ExperimentConfig:
    overrides = {k: getattr(args, k) for k in CONFIG_KEYS if getattr(args, k, None) is not None}
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selftest":
            from .selftest import run_selftest
            return 0 if run_selftest() else 1
        cfg = _config(args)
        if args.command in STUDY_OF:
            rows = run_experiment(cfg, STUDY_OF[args.command])
            if not cfg.output:
                sys.stdout.write(rows_to_csv(rows))
            return 0
        if args.command == "basis":
            if cfg.cache_dir is None:
                cfg.cache_dir = ".stochslod-cache"
            for le, lH, ell in combinations(cfg):
                model = build_coarse_model(cfg, lH, le, ell)
                print(f"H=2^-{lH} eps=2^-{le} ell={ell}: sigma={model.sigma:.6g} "
                      f"C_rb={model.C_rb:.6g} cache={cfg.cache_dir}")
            return 0
        if args.command == "solve":
            f = rhs_function(cfg.rhs, cfg.d, cfg.rhs_values)
            lines = ["log_eps,log_H,ell,element_index,value"]
            for le, lH, ell in combinations(cfg):
                ubar = assemble_coarse_solution(build_coarse_model(cfg, lH, le, ell), f)
                lines += [f"{le},{lH},{ell},{i},{format(float(v), '.17g')}" for i, v in enumerate(ubar)]
            text = "\n".join(lines) + "\n"
            if cfg.output:
                Path(cfg.output).write_text(text)
            else:
                sys.stdout.write(text)
            return 0
    except (ConfigurationError, RieszError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
