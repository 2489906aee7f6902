"""Random piecewise constant coefficients on the eps-mesh.

Every random stream is derived statelessly from (global seed, purpose, id, sample
index) through numpy's SeedSequence hash and drives a counter-based Philox
generator, so a sample is reproducible regardless of which process draws it or in
which order.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .grid import ConfigurationError, GridSpec, Region

PURPOSES = ("coefficient", "boundary", "reference")


@dataclass(frozen=True)
class FieldLaw:
    """i.i.d. Uniform[alpha, beta] element values; `sampler` is 'pseudo' or 'sobol'."""

    alpha: float = 0.1
    beta: float = 1.0
    sampler: str = "pseudo"

    def __post_init__(self):
        if not 0 < self.alpha <= self.beta:
            raise ConfigurationError(f"need 0 < alpha <= beta, got ({self.alpha}, {self.beta})")
        if self.sampler not in ("pseudo", "sobol"):
            raise ConfigurationError(f"unknown sampler {self.sampler!r}")

    @property
    def deterministic(self) -> bool:
        return self.alpha == self.beta


def _ident_words(ident) -> list[int]:
    """Stable 32-bit words for an integer or any repr-able key."""
    if isinstance(ident, (int, np.integer)) and ident >= 0:
        return [int(ident) & 0xFFFFFFFF, int(ident) >> 32]
    digest = hashlib.sha256(repr(ident).encode()).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


@dataclass(frozen=True)
class SeedScheme:
    global_seed: int = 0

    def seed_sequence(self, purpose: str, ident, index: int) -> np.random.SeedSequence:
        if purpose not in PURPOSES:
            raise ValueError(f"unknown purpose {purpose!r}")
        words = [
            self.global_seed & 0xFFFFFFFF,
            (self.global_seed >> 32) & 0xFFFFFFFF,
            PURPOSES.index(purpose),
            *_ident_words(ident),
            int(index),
        ]
        return np.random.SeedSequence(words)

    def rng(self, purpose: str, ident, index: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self.seed_sequence(purpose, ident, index)))


@dataclass(frozen=True)
class FieldSample:
    """One coefficient realisation, values on the eps-mesh (shape spec.shape('eps'))."""

    spec: GridSpec
    values: np.ndarray
    index: int
    provenance: dict = field(default_factory=dict, compare=False)

    def fine_values(self) -> np.ndarray:
        """Value on every fine cell of the domain."""
        r = self.spec.ratio("eps", "fine")
        out = self.values
        for ax in range(self.spec.d):
            out = np.repeat(out, r, axis=ax)
        return out


def sample_field(spec: GridSpec, law: FieldLaw, seeds: SeedScheme, index: int,
                 purpose: str = "coefficient", ident=0) -> FieldSample:
    """i.i.d. Uniform[alpha, beta] value per eps-element; pure in its arguments."""
    if law.deterministic:
        values = np.full(spec.shape("eps"), float(law.alpha))
    else:
        u = seeds.rng(purpose, ident, index).random(spec.shape("eps"))
        values = law.alpha + (law.beta - law.alpha) * u
    prov = {"sampler": "pseudo", "global_seed": seeds.global_seed, "purpose": purpose,
            "id": repr(ident), "index": int(index)}
    return FieldSample(spec, values, int(index), prov)


def sobol_point(dim: int, index: int) -> np.ndarray:
    """Point `index + 1` of the unscrambled Sobol sequence (Joe-Kuo direction numbers).

    The all-zero initial point is skipped, so index 0 gives (1/2, ..., 1/2).
    """
    engine = qmc.Sobol(d=dim, scramble=False)
    engine.fast_forward(index + 1)
    return engine.random(1)[0]


def sample_field_lowdiscrepancy(spec: GridSpec, law: FieldLaw, index: int) -> FieldSample:
    """Sobol point number `index` (see `sobol_point`) mapped to [alpha, beta]^(#eps cells)."""
    if spec.d != 1:
        raise ConfigurationError("low-discrepancy coefficient sampling is only supported for d=1")
    n = spec.count("eps")
    if n > qmc.Sobol.MAXDIM:
        raise ConfigurationError(f"Sobol generator supports at most {qmc.Sobol.MAXDIM} dimensions")
    u = sobol_point(n, index)
    values = (law.alpha + (law.beta - law.alpha) * u).reshape(spec.shape("eps"))
    return FieldSample(spec, values, int(index), {"sampler": "sobol", "index": int(index)})


def restrict_field(sample: FieldSample, region: Region) -> np.ndarray:
    """Coefficient on every fine cell of `region` (C order over the region's cells)."""
    spec = sample.spec
    r_ce = spec.ratio("coarse", "eps")
    r_ef = spec.ratio("eps", "fine")
    sl = tuple(slice(a * r_ce, b * r_ce) for a, b in zip(region.lo, region.hi))
    out = sample.values[sl]
    for ax in range(spec.d):
        out = np.repeat(out, r_ef, axis=ax)
    return out.ravel()


def dump_csv(sample: FieldSample, path) -> None:
    """Write (element_index, value) rows, element indices flat at the eps level."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["element_index", "value"])
        for i, v in enumerate(sample.values.ravel()):
            w.writerow([i, repr(float(v))])
