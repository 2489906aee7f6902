"""Stochastic super-localized source terms, mean localized responses and the coarse model.

Coarse P0 data on a patch are handled in scaled coordinates ghat_K = g_K sqrt|K|, in
which the Euclidean inner product is the L2 inner product.  Pi denotes the scaled
projection, so the scaled coarse projection of the Dirichlet response to a scaled
source ghat is R_D ghat with R_D = Pi_I A_II^-1 Pi_I^T.
"""
from __future__ import annotations

import hashlib
import json
import logging
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .field import FieldLaw, FieldSample, SeedScheme, restrict_field, sample_field
from .grid import ConfigurationError, GridSpec, Patch, patch, weight_function

log = logging.getLogger(__name__)

GRAM_MODES = ("exact", "sampled")
REUSE_MODES = ("none", "translation", "symmetry")
CACHE_VERSION = 1


def process_pool(workers: int) -> ProcessPoolExecutor:
    # forked children deadlock in threaded BLAS / CHOLMOD state, so always spawn
    return ProcessPoolExecutor(max_workers=workers, mp_context=multiprocessing.get_context("spawn"))


class RieszError(RuntimeError):
    """The source terms do not form a usable (stable) basis."""

    def __init__(self, message):
        super().__init__(
            f"{message}; the local source terms are close to linearly dependent. "
            "Stabilize the selection: raise the threshold exponent p, change the weight "
            "exponent r, or the oversampling order ell"
        )


@dataclass(frozen=True)
class SamplingConfig:
    """Sampling and selection parameters.

    gram_mode 'exact' uses, per coefficient sample, the exact Gram matrix of the
    projected A-harmonic space (energy-normalized); 'sampled' projects
    m = m_factor * N harmonic extensions of Gaussian boundary data per sample.
    """

    M: int = 5000
    m_factor: int = 3
    p: float = 1.5
    r: float = 6.0
    threshold_floor: float = 1e-10
    objective: str = "minimize"
    gram_mode: str = "exact"
    reuse: str = "symmetry"

    def __post_init__(self):
        if self.M < 1 or self.m_factor < 1:
            raise ConfigurationError("need M >= 1 and m_factor >= 1")
        if not self.p > 1:
            raise ConfigurationError(f"threshold exponent p must exceed 1, got {self.p}")
        if self.r < 1:
            raise ConfigurationError(f"weight exponent r must be >= 1, got {self.r}")
        if self.objective not in ("minimize", "maximize"):
            raise ConfigurationError(f"unknown objective {self.objective!r}")
        if self.gram_mode not in GRAM_MODES:
            raise ConfigurationError(f"unknown gram mode {self.gram_mode!r}")
        if self.reuse not in REUSE_MODES:
            raise ConfigurationError(f"unknown reuse mode {self.reuse!r}")


@dataclass
class LocalSourceTerm:
    """g_T as P0 values on the patch elements (lexicographic), unit L2 norm."""

    center: tuple
    values: np.ndarray
    element_volume: float
    normalized: bool = True

    @property
    def scaled(self) -> np.ndarray:
        return self.values * np.sqrt(self.element_volume)

    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.scaled))


@dataclass
class LocalBasis:
    """Source term, sigma_T and the P0 values of Pi_H E[phi_T^loc] on the patch."""

    patch: Patch
    source: LocalSourceTerm
    sigma_T: float
    mean_response: np.ndarray
    sigma_raw: float = float("nan")
    second_moment: np.ndarray | None = None
    log: str = ""


class RunningMean:
    """mean_k = mean_{k-1} + (x_k - mean_{k-1}) / k; identical samples give the sample bitwise."""

    def __init__(self):
        self.count = 0
        self.mean = None

    def add(self, x) -> None:
        x = np.asarray(x, dtype=float)
        self.count += 1
        if self.mean is None:
            self.mean = x.copy()
        else:
            self.mean += (x - self.mean) / self.count


class GramAccumulator:
    """Streams blocks P_i into X X^T, in the order the blocks arrive."""

    def __init__(self, N: int):
        self.gram = np.zeros((N, N))
        self.columns = 0

    def add(self, block) -> None:
        block = np.asarray(block, dtype=float)
        if block.ndim != 2 or block.shape[0] != self.gram.shape[0]:
            raise ValueError(f"block of shape {block.shape} does not have {self.gram.shape[0]} rows")
        self.gram += block @ block.T
        self.gram = 0.5 * (self.gram + self.gram.T)
        self.columns += block.shape[1]


def accumulate_gram(blocks, N: int | None = None) -> np.ndarray:
    blocks = list(blocks)
    if N is None:
        if not blocks:
            raise ValueError("N is required when there are no blocks")
        N = np.asarray(blocks[0]).shape[0]
    acc = GramAccumulator(N)
    for b in blocks:
        acc.add(b)
    return acc.gram


# --- per-patch linear algebra ----------------------------------------------------

def _coefficient_on(patch_: Patch, coefficient) -> np.ndarray:
    if isinstance(coefficient, FieldSample):
        return restrict_field(coefficient, patch_.region)
    return np.asarray(coefficient, dtype=float)


def _h1_matrix(region) -> sp.csc_matrix:
    return (fem.full_matrix(region, 1.0, "stiffness") + fem.full_matrix(region, 1.0, "mass")).tocsc()


def sample_projected_harmonics(patch_: Patch, coefficient, m: int, seeds: SeedScheme,
                               index: int = 0, ident=0, boundary_data=None) -> np.ndarray:
    """N x m block of scaled P0 projections of H1-normalized A-harmonic extensions.

    Boundary data are i.i.d. standard normal on the box boundary off the domain
    boundary, zero on Gamma, unless given explicitly as a (boundary nodes, m) array.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    region = patch_.region
    a = _coefficient_on(patch_, coefficient)
    inner, bnd = region.interior_nodes, region.boundary_nodes
    if bnd.size == 0:  # whole-domain patch, the harmonic space is {0}
        return np.zeros((region.N, m))
    h = region.spec.h
    A_II = fem.AssemblyPlan(region.node_shape, h, inner).matrix(a)
    A_IB = fem.AssemblyPlan(region.node_shape, h, inner, bnd).matrix(a)
    if boundary_data is not None:
        data = np.array(boundary_data, dtype=float).reshape(bnd.size, m)
        if not np.all(np.any(data, axis=0)):
            raise ValueError("boundary data columns must be nonzero")
    else:
        data = seeds.rng("boundary", ident, index).standard_normal((bnd.size, m))
    for j in range(m):  # probability zero, but a zero column cannot be normalized
        attempt = 0
        while not np.any(data[:, j]):
            attempt += 1
            data[:, j] = seeds.rng("boundary", (ident, "retry", j, attempt), index).standard_normal(bnd.size)
    rhs = -(A_IB @ data)
    x = fem.Factor(A_II)(rhs)
    fem._residual_check(A_II, x, rhs, 1e-10, "harmonic extension")
    n_nodes = int(np.prod(region.node_shape))
    U = np.zeros((n_nodes, m))
    U[bnd] = data
    U[inner] = x
    Q = _h1_matrix(region)
    norms_ = np.sqrt(np.einsum("ij,ij->j", U, Q @ U))
    return (fem.projection_matrix(region) @ U) / norms_


def exact_gram(patch_: Patch, coefficient) -> np.ndarray:
    """Gram matrix of Pi applied to the unit ball of the A-harmonic space on the patch.

    With Gamma nonempty the norm is the A-energy; otherwise the energy plus
    |D_T| * mean^2, which also controls constants.
    """
    prob = PatchKernel(patch_, "exact")
    return prob.sample(_coefficient_on(patch_, coefficient))[0]


class PatchKernel:
    """Per-sample work on one patch: Gram contribution and the response matrix R_D."""

    def __init__(self, patch_: Patch, gram_mode: str = "exact", m: int = 0):
        self.patch = patch_
        region = patch_.region
        self.region = region
        self.mode = gram_mode
        self.m = m
        h = region.spec.h
        shape = region.node_shape
        inner = region.interior_nodes
        self.plan_I = fem.AssemblyPlan(shape, h, inner)
        Pi = fem.projection_matrix(region)
        self.Pi_I = Pi[:, inner]
        self.Pi_I_T = self.Pi_I.T.toarray()
        if gram_mode == "exact":
            nodes = np.arange(int(np.prod(shape)))
            if region.has_gamma:
                free = nodes[region.node_classes != 2]
                self.u = None
            else:
                free = nodes[1:]  # pin one corner to factor out constants
                u = np.sqrt(region.element_volume) * np.ones(region.N)
                self.u = u / np.linalg.norm(u)
            self.plan_V = fem.AssemblyPlan(shape, h, free)
            self.Pi_V = Pi[:, free]
            self.Pi_V_T = self.Pi_V.T.toarray()
        else:
            self.bnd = region.boundary_nodes
            self.plan_B = fem.AssemblyPlan(shape, h, inner, self.bnd)
            self.Pi = Pi
            self.Q = _h1_matrix(region)

    def _response(self, F, P_T, Pi):
        X = F(P_T)
        return Pi @ X, X

    def sample(self, a, boundary_rng=None):
        """Returns (Gram contribution, R_D) for the fine-cell coefficient `a`."""
        A_I = self.plan_I.matrix(a)
        F_I = self.plan_I.factor(a)
        X_I = F_I(self.Pi_I_T)
        fem._residual_check(A_I, X_I, self.Pi_I_T, 1e-10, "patch Dirichlet solve")
        R_D = self.Pi_I @ X_I
        R_D = 0.5 * (R_D + R_D.T)
        if self.mode == "exact":
            A_V = self.plan_V.matrix(a)
            X_V = self.plan_V.factor(a)(self.Pi_V_T)
            fem._residual_check(A_V, X_V, self.Pi_V_T, 1e-10, "patch Neumann solve")
            R_N = self.Pi_V @ X_V
            G = 0.5 * (R_N + R_N.T) - R_D
            if self.u is not None:
                P = np.eye(G.shape[0]) - np.outer(self.u, self.u)
                G = P @ G @ P + np.outer(self.u, self.u)
                G = 0.5 * (G + G.T)
            return G, R_D
        if self.bnd.size == 0:  # whole-domain patch, the harmonic space is {0}
            return np.zeros((self.region.N, self.m)), R_D
        data = boundary_rng.standard_normal((self.bnd.size, self.m))
        data[:, ~np.any(data, axis=0)] = 1.0  # probability zero guard
        A_IB = self.plan_B.matrix(a)
        rhs = -(A_IB @ data)
        x = F_I(rhs)
        fem._residual_check(A_I, x, rhs, 1e-10, "harmonic extension")
        n_nodes = self.Pi.shape[1]
        U = np.zeros((n_nodes, self.m))
        U[self.bnd] = data
        U[self.region.interior_nodes] = x
        norms_ = np.sqrt(np.einsum("ij,ij->j", U, self.Q @ U))
        return (self.Pi @ U) / norms_, R_D


# --- selection -------------------------------------------------------------------

def candidate_indices(sigmas, p: float, floor: float = 1e-10) -> np.ndarray:
    """0-based indices i with sigma_i / sigma_1 <= max((sigma_N / sigma_1)**(1/p), floor).

    `sigmas` are sorted descending.  With p = 1 only the last index is kept.
    """
    s = np.asarray(sigmas, dtype=float)
    N = s.size
    if N == 0:
        raise ValueError("no singular values")
    if s[0] <= 0:
        return np.arange(N)
    if p == 1:
        return np.array([N - 1])
    ratio = s / s[0]
    thresh = max(ratio[-1] ** (1.0 / p), floor)
    idx = np.flatnonzero(ratio <= thresh)
    if idx.size == 0:
        idx = np.array([N - 1])
    return idx


def select_source_term(eigvals, eigvecs, weights, config: SamplingConfig, *,
                       center_local: int = 0, center=(), element_volume: float = 1.0,
                       p: float | None = None, scale: float = 1.0):
    """Pick g_T in the span of the candidate left singular vectors.

    `eigvals`/`eigvecs` are the eigenpairs of the Gram matrix sorted descending,
    `weights` the per-element w_T(K).  The weighted L2 norm is minimized (or
    maximized) under unit L2 norm.  Returns (LocalSourceTerm, sigma_T) where
    sigma_T = sqrt(lambda_N / scale).
    """
    lam = np.clip(np.asarray(eigvals, dtype=float), 0.0, None)
    V = np.asarray(eigvecs, dtype=float)
    if lam.size > 1 and np.any(np.diff(lam) > 1e-14 * max(lam[0], 1e-300)):
        raise ValueError("eigenpairs must be sorted descending")
    sig = np.sqrt(lam)
    I = candidate_indices(sig, config.p if p is None else p, config.threshold_floor)
    C = V[:, I]
    W = np.asarray(weights, dtype=float)
    Hm = C.T @ (W[:, None] * C)
    Hm = 0.5 * (Hm + Hm.T)
    mu, Z = np.linalg.eigh(Hm)
    target = mu[0] if config.objective == "minimize" else mu[-1]
    tol = 1e-12 * max(1.0, np.max(np.abs(mu)))
    tie = np.flatnonzero(np.abs(mu - target) <= tol)
    if tie.size == 1:
        c = Z[:, tie[0]]
    else:
        # degenerate optimum: take the projection of the lowest-index unit vector
        E = Z[:, tie]
        for j in range(E.shape[0]):
            c = E @ E[j]
            if np.linalg.norm(c) > 1e-8:
                break
    g = C @ c
    g /= np.linalg.norm(g)
    ref = g[center_local] if abs(g[center_local]) > 1e-14 else g[np.flatnonzero(np.abs(g) > 1e-14)[0]]
    if ref < 0:
        g = -g
    sigma_T = float(np.sqrt(lam[-1] / scale))
    term = LocalSourceTerm(tuple(center), g / np.sqrt(element_volume), element_volume)
    return term, sigma_T


def sorted_eigh(G):
    lam, V = np.linalg.eigh(0.5 * (G + G.T))
    return lam[::-1], V[:, ::-1]


# --- local basis, reference path ---------------------------------------------------

def compute_local_basis(patch_: Patch, g_T, field_samples, seeds: SeedScheme | None = None,
                        *, second_moment: bool = False, sigma_T: float = float("nan"),
                        law: FieldLaw | None = None) -> LocalBasis:
    """Empirical mean of Pi_H phi_T^loc over the coefficient samples, in sample order.

    `field_samples` is a sequence of FieldSample / per-fine-cell arrays, or a count
    M, in which case samples 0..M-1 are drawn from `seeds` and `law`.
    """
    region = patch_.region
    if isinstance(g_T, LocalSourceTerm):
        term = g_T
    else:
        values = np.asarray(g_T, dtype=float)
        term = LocalSourceTerm(patch_.center, values, region.element_volume,
                               normalized=abs(np.linalg.norm(values) * np.sqrt(region.element_volume) - 1) < 1e-12)
    if isinstance(field_samples, (int, np.integer)):
        if seeds is None:
            raise ValueError("seeds are required to draw samples")
        law = law or FieldLaw()
        field_samples = (sample_field(region.spec, law, seeds, i) for i in range(int(field_samples)))
    Pavg = fem.projection_matrix(region, scaled=False)
    load = fem.assemble_load_p0(region, term.values)
    mean, sq = RunningMean(), RunningMean()
    for i, sample in enumerate(field_samples):
        a = _coefficient_on(patch_, sample)
        op = fem.assemble_stiffness(region, a)
        try:
            u = fem.solve_dirichlet(op, load)
        except fem.SolverError as exc:
            raise fem.SolverError(f"sample {i}: {exc}", residual=exc.residual) from exc
        y = Pavg @ u.values
        mean.add(y)
        if second_moment:
            sq.add(y * y)
    if mean.count == 0:
        raise ValueError("no coefficient samples")
    return LocalBasis(patch_, term, sigma_T, mean.mean,
                      second_moment=sq.mean if second_moment else None)


# --- symmetry reduction ----------------------------------------------------------

def _transform_layout(layout, flips, transpose):
    out = [(w - 1 - o, w, hi, lo) if f else (o, w, lo, hi)
           for (o, w, lo, hi), f in zip(layout, flips)]
    if transpose:
        out = out[::-1]
    return tuple(out)


def _group(d: int, reuse: str):
    if reuse != "symmetry":
        return [((False,) * d, False)]
    flips = [tuple(bool(b) for b in bits) for bits in np.ndindex(*(2,) * d)]
    return [(f, t) for t in ((False, True) if d == 2 else (False,)) for f in flips]


def reference_key(p: Patch, reuse: str):
    """(key, (flips, transpose)) such that the transform maps p onto the reference layout."""
    if reuse == "none":
        return ("T", p.center_flat), ((False,) * p.spec.d, False)
    best = None
    for f, t in _group(p.spec.d, reuse):
        lay = _transform_layout(p.layout_key(), f, t)
        if best is None or lay < best[0]:
            best = (lay, (f, t))
    return ("L",) + best[0], best[1]


def transform_center(spec: GridSpec, T, g):
    flips, transpose = g
    n = spec.n("coarse")
    c = [n - 1 - i if f else i for i, f in zip(T, flips)]
    return tuple(c[::-1]) if transpose else tuple(c)


def to_reference(arr: np.ndarray, g) -> np.ndarray:
    flips, transpose = g
    for ax, f in enumerate(flips):
        if f:
            arr = np.flip(arr, axis=ax)
    return arr.T if transpose else arr


def from_reference(arr: np.ndarray, g) -> np.ndarray:
    flips, transpose = g
    if transpose:
        arr = arr.T
    for ax, f in enumerate(flips):
        if f:
            arr = np.flip(arr, axis=ax)
    return arr


# --- fused per-patch pipeline --------------------------------------------------------

@dataclass(frozen=True)
class PatchJob:
    spec: GridSpec
    center: tuple
    ell: int
    config: SamplingConfig
    law: FieldLaw
    seeds: SeedScheme
    key: tuple
    source_kind: str = "slod"
    common_random_numbers: bool = False
    allow_whole_domain: bool = False


def patch_coefficient(job: PatchJob, p: Patch, index: int) -> np.ndarray:
    """Fine-cell coefficient of sample `index` on the job's patch."""
    spec, region = job.spec, p.region
    if job.common_random_numbers:
        return restrict_field(sample_field(spec, job.law, job.seeds, index), region)
    if job.law.deterministic:
        return np.full(int(np.prod(region.fine_shape)), float(job.law.alpha))
    r_ce = spec.ratio("coarse", "eps")
    eps_shape = tuple(w * r_ce for w in region.coarse_shape)
    u = job.seeds.rng("coefficient", job.key, index).random(eps_shape)
    vals = job.law.alpha + (job.law.beta - job.law.alpha) * u
    r_ef = spec.ratio("eps", "fine")
    for ax in range(spec.d):
        vals = np.repeat(vals, r_ef, axis=ax)
    return vals.ravel()


def fused_pass(p: Patch, coefficients, config: SamplingConfig, source_kind: str = "slod",
               boundary_rngs=None) -> dict:
    """Gram, selection and mean response of one patch in a single pass over the samples.

    `coefficients` yields per-fine-cell arrays (or FieldSamples) in sample order;
    the sampled Gram mode also needs one boundary-data generator per sample.
    The mean response is E[R_D] ghat, which equals the mean of the per-sample
    responses to the finally selected source term.
    """
    N = p.N
    m = config.m_factor * N
    kernel = PatchKernel(p, config.gram_mode, m)
    gram_mean, gram_sum = RunningMean(), GramAccumulator(N)
    rd_mean, lod_mean = RunningMean(), RunningMean()
    vol = p.region.element_volume
    rngs = iter(boundary_rngs) if boundary_rngs is not None else None
    for i, coefficient in enumerate(coefficients):
        a = _coefficient_on(p, coefficient)
        rng = next(rngs) if config.gram_mode == "sampled" else None
        try:
            Gi, R_D = kernel.sample(a, rng)
        except fem.SolverError as exc:
            raise fem.SolverError(f"patch {p.center}, sample {i}: {exc}", residual=exc.residual) from exc
        if config.gram_mode == "exact":
            gram_mean.add(Gi)
        else:
            gram_sum.add(Gi)
        rd_mean.add(R_D)
        if source_kind == "lod":
            e_T = np.zeros(N)
            e_T[p.center_local] = 1.0
            lod_mean.add(vol * scipy.linalg.solve(R_D, e_T, assume_a="pos"))
    if rd_mean.count == 0:
        raise ValueError("no coefficient samples")
    if config.gram_mode == "exact":
        G, scale = gram_mean.mean, 1.0
    else:
        G, scale = gram_sum.gram, float(gram_sum.columns)
    lam, V = sorted_eigh(G)
    w = weight_function(p, config.r)
    term, sigma_T = select_source_term(lam, V, w, config, center_local=p.center_local,
                                       center=p.center, element_volume=vol, scale=scale)
    if source_kind == "lod":
        ghat = lod_mean.mean / np.sqrt(vol)  # g_K = p_K / |K|, scaled by sqrt|K|
        nrm = np.linalg.norm(ghat)
        if not nrm > 0:
            raise RieszError(f"mean LOD source term of patch {p.center} vanishes")
        ghat /= nrm
        term = LocalSourceTerm(p.center, ghat / np.sqrt(vol), vol)
        sigma_T = float(np.sqrt(max(ghat @ G @ ghat, 0.0) / scale))
    response = rd_mean.mean @ term.scaled / np.sqrt(vol)
    shape = p.region.coarse_shape
    return {
        "g": term.values.reshape(shape),
        "response": response.reshape(shape),
        "sigma_T": sigma_T,
        "sigma_raw": float(np.sqrt(max(lam[-1], 0.0))),
        "eigvals": lam,
    }


def run_patch(job: PatchJob) -> dict:
    """One pass over the M samples for the patch around `job.center`."""
    cfg = job.config
    p = patch(job.spec, job.center, job.ell, allow_whole_domain=job.allow_whole_domain)
    coefficients = (patch_coefficient(job, p, i) for i in range(cfg.M))
    rngs = None
    if cfg.gram_mode == "sampled":
        rngs = (job.seeds.rng("boundary", job.key, i) for i in range(cfg.M))
    return fused_pass(p, coefficients, cfg, job.source_kind, rngs)


def fused_local_basis(p: Patch, coefficients, config: SamplingConfig, source_kind: str = "slod",
                      boundary_rngs=None) -> LocalBasis:
    res = fused_pass(p, coefficients, config, source_kind, boundary_rngs)
    term = LocalSourceTerm(p.center, res["g"].ravel(), p.region.element_volume)
    return LocalBasis(p, term, res["sigma_T"], res["response"].ravel(), res["sigma_raw"])


# --- cache ------------------------------------------------------------------------

def config_hash(job: PatchJob) -> str:
    payload = {
        "version": CACHE_VERSION,
        "spec": asdict(job.spec),
        "ell": job.ell,
        "config": asdict(job.config),
        "law": asdict(job.law),
        "seed": job.seeds.global_seed,
        "key": repr(job.key),
        "kind": job.source_kind,
        "crn": job.common_random_numbers,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def cache_path(cache_dir, job: PatchJob) -> Path:
    s = job.spec
    ident = hashlib.sha256(repr(job.key).encode()).hexdigest()[:16]
    name = f"d{s.d}_H{s.log_H}_e{s.log_eps}_h{s.log_h}_l{job.ell}_{job.source_kind}_{ident}.npz"
    return Path(cache_dir) / name


def load_cached(cache_dir, job: PatchJob):
    """(result or None, warning text)."""
    path = cache_path(cache_dir, job)
    if not path.exists():
        return None, ""
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            if header.get("hash") != config_hash(job) or header.get("kind") != job.source_kind:
                return None, f"cache {path.name}: configuration hash mismatch, recomputed"
            return {
                "g": z["g"], "response": z["response"], "sigma_T": float(z["sigma_T"]),
                "sigma_raw": float(z["sigma_raw"]), "eigvals": z["eigvals"],
            }, ""
    except (OSError, KeyError, ValueError) as exc:
        return None, f"cache {path.name}: unreadable ({exc}), recomputed"


def store_cached(cache_dir, job: PatchJob, res: dict) -> None:
    path = cache_path(cache_dir, job)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"hash": config_hash(job), "kind": job.source_kind,
                         "key": repr(job.key), "version": CACHE_VERSION})
    tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, header=np.array(header), g=res["g"], response=res["response"],
                 sigma_T=np.array(res["sigma_T"]), sigma_raw=np.array(res["sigma_raw"]),
                 eigvals=res["eigvals"])
    os.replace(tmp, path)


def _run_cached(args):
    job, cache_dir = args
    warning = ""
    if cache_dir is not None:
        res, warning = load_cached(cache_dir, job)
        if res is not None:
            return res, ""
    res = run_patch(job)
    if cache_dir is not None:
        store_cached(cache_dir, job, res)
    return res, warning


# --- coarse model --------------------------------------------------------------------

@dataclass
class CoarseModel:
    spec: GridSpec
    ell: int
    bases: dict
    expansion: sp.csc_matrix
    config: SamplingConfig
    source_kind: str = "slod"
    warnings: list = field(default_factory=list)

    @property
    def gram(self) -> np.ndarray:
        B = self.expansion
        return (B.T @ B).toarray()

    @property
    def sigma(self) -> float:
        return sigma_overall(self)

    @property
    def C_rb(self) -> float:
        return compute_crb(self)


def build_model(spec: GridSpec, ell: int, config: SamplingConfig, law: FieldLaw,
                seeds: SeedScheme, *, source_kind: str = "slod", workers: int = 1,
                cache_dir=None, common_random_numbers: bool = False,
                allow_whole_domain: bool = False) -> CoarseModel:
    """Local bases for every coarse element; patch types are computed once and mapped."""
    if source_kind not in ("slod", "lod"):
        raise ConfigurationError(f"unknown source kind {source_kind!r}")
    reuse = "none" if common_random_numbers else config.reuse
    n = spec.count("coarse")
    placements = []
    jobs = {}
    for T in range(n):
        p = patch(spec, T, ell, allow_whole_domain=allow_whole_domain)
        key, g = reference_key(p, reuse)
        placements.append((p, key, g))
        if key not in jobs:
            center = transform_center(spec, p.center, g)
            jobs[key] = PatchJob(spec, center, ell, config, law, seeds, key, source_kind,
                                 common_random_numbers, allow_whole_domain)
    keys = sorted(jobs, key=repr)
    args = [(jobs[k], cache_dir) for k in keys]
    if workers > 1 and len(args) > 1:
        with process_pool(workers) as ex:
            results = list(ex.map(_run_cached, args))
    else:
        results = [_run_cached(a) for a in args]
    by_key = dict(zip(keys, results))
    warnings = [w for _, w in results if w]
    bases = {}
    rows, cols, vals = [], [], []
    sq = np.sqrt(spec.H ** spec.d)
    for T, (p, key, g) in enumerate(placements):
        res, _ = by_key[key]
        gv = from_reference(res["g"], g).ravel()
        resp = from_reference(res["response"], g).ravel()
        term = LocalSourceTerm(p.center, gv.copy(), p.region.element_volume)
        bases[T] = LocalBasis(p, term, res["sigma_T"], resp.copy(), res["sigma_raw"])
        rows.append(p.elements)
        cols.append(np.full(p.N, T))
        vals.append(gv * sq)
    B = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    return CoarseModel(spec, ell, bases, B, config, source_kind, warnings)


def model_from_bases(spec: GridSpec, bases: dict, config: SamplingConfig | None = None,
                     ell: int = 0) -> CoarseModel:
    """CoarseModel from LocalBasis objects keyed by flat coarse index."""
    n = spec.count("coarse")
    rows, cols, vals = [], [], []
    for T in range(n):
        b = bases[T]
        rows.append(b.patch.elements)
        cols.append(np.full(b.patch.N, T))
        vals.append(b.source.scaled)
    B = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    return CoarseModel(spec, ell, dict(bases), B, config or SamplingConfig())


def coarse_projection(spec: GridSpec, f) -> np.ndarray:
    """P0 values of Pi_H f on the coarse mesh, flat.

    Callables are averaged with the per-fine-cell midpoint rule; arrays are taken
    as coarse P0 values.
    """
    if callable(f):
        h = spec.h
        axes = [(np.arange(spec.n("fine")) + 0.5) * h] * spec.d
        mids = np.meshgrid(*axes, indexing="ij")
        vals = np.asarray(f(*mids), dtype=float) * np.ones(spec.shape("fine"))
        from .grid import block_average
        return block_average(vals, spec.ratio("coarse", "fine")).ravel()
    vals = np.asarray(f, dtype=float)
    if vals.size != spec.count("coarse"):
        raise ConfigurationError(f"expected {spec.count('coarse')} coarse values, got {vals.size}")
    return vals.ravel().copy()


def assemble_coarse_solution(model: CoarseModel, f, *, cond_limit: float = 1e12,
                             return_details: bool = False):
    """ubar = sum_T c_T Pi_H E[phi_T^loc] where B c = Pi_H f in scaled coordinates."""
    spec = model.spec
    vol = spec.H ** spec.d
    fh = coarse_projection(spec, f) * np.sqrt(vol)
    n = fh.size
    B = model.expansion.tocsc()
    try:
        lu = spla.splu(B, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise RieszError(f"expansion matrix is singular ({exc})") from exc
    Bnorm = spla.norm(B, 1)
    inv = spla.LinearOperator((n, n), matvec=lambda x: lu.solve(np.asarray(x, float).ravel()),
                              rmatvec=lambda x: lu.solve(np.asarray(x, float).ravel(), trans="T"),
                              dtype=float)
    cond = Bnorm * spla.onenormest(inv) if n > 1 else Bnorm * abs(lu.solve(np.ones(1))[0])
    if not np.isfinite(cond) or cond > cond_limit:
        raise RieszError(f"condition estimate {cond:.3e} of the expansion matrix exceeds {cond_limit:.0e}")
    c = lu.solve(fh) if n else np.zeros(0)
    resid = float(np.linalg.norm(B @ c - fh))
    fnorm = float(np.linalg.norm(fh))
    if resid > 1e-8 * fnorm:
        raise RieszError(f"expansion residual {resid:.3e} exceeds 1e-8 * {fnorm:.3e}")
    ubar = np.zeros(n)
    for T in range(n):
        b = model.bases[T]
        ubar[b.patch.elements] += c[T] * b.mean_response
    if return_details:
        return ubar, {"c": c, "residual": resid, "rhs_norm": fnorm, "cond": float(cond)}
    return ubar


def compute_crb(model_or_gram, tol: float = 1e-12) -> float:
    """1 / lambda_min of the Gram matrix of the (unit) source terms."""
    G = model_or_gram.gram if isinstance(model_or_gram, CoarseModel) else np.asarray(model_or_gram, float)
    lam = np.linalg.eigvalsh(0.5 * (G + G.T))
    if lam.size == 0:
        raise ValueError("empty Gram matrix")
    if lam[0] <= tol * max(lam[-1], 1.0):
        raise RieszError(f"smallest Gram eigenvalue {lam[0]:.3e} is not positive")
    return float(1.0 / lam[0])


def sigma_overall(model: CoarseModel) -> float:
    return float(max(b.sigma_T for b in model.bases.values()))
