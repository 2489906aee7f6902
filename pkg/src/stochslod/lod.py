"""Bubbles, constrained fine-scale corrections and averaged LOD source terms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import fem
from .field import FieldLaw, FieldSample, SeedScheme, sample_field
from .grid import ConfigurationError, GridSpec, Patch, Region
from .slod import LocalSourceTerm, RunningMean, _coefficient_on


@dataclass
class Bubble:
    """Nonnegative function supported inside coarse element `center` with element average 1."""

    spec: GridSpec
    center: tuple
    region: Region  # the single coarse element
    values: np.ndarray  # nodal values on region nodes, flat C order

    def on(self, region: Region) -> np.ndarray:
        """Nodal values on all nodes of a larger region containing the element."""
        r = self.spec.ratio("coarse", "fine")
        out = np.zeros(region.node_shape)
        sl = tuple(slice((c - lo) * r, (c - lo + 1) * r + 1) for c, lo in zip(self.center, region.lo))
        out[sl] = self.values.reshape(self.region.node_shape)
        return out.ravel()


@dataclass
class LODSourceTerm:
    center: tuple
    multipliers: list  # per sample p, one entry per patch element
    mean: np.ndarray  # P0 values E[g^LOD] = E[p] / |K|
    normalized: LocalSourceTerm


def bubble(spec: GridSpec, T) -> Bubble:
    """Tensor-product hat peaked at the midpoint of T, rescaled to exact element average 1."""
    if spec.log_h <= spec.log_H:
        raise ConfigurationError("the fine mesh has no nodes inside a coarse element")
    center = spec.element_index(T)
    region = Region(spec, center, tuple(c + 1 for c in center))
    r = spec.ratio("coarse", "fine")
    t = np.arange(r + 1) / r
    hat = 1.0 - np.abs(2.0 * t - 1.0)
    vals = np.ones((1,) * 0)
    for _ in range(spec.d):
        vals = np.multiply.outer(vals, hat)
    from .grid import cell_averages

    avg = cell_averages(vals).mean()
    return Bubble(spec, center, region, (vals / avg).ravel())


def lod_correction(patch_: Patch, coefficient, b: Bubble | np.ndarray):
    """x solving [A B^T; B 0][x; p] = [A b; 0] on the patch; returns (phi = b - x, x, p).

    B holds element averages over every coarse element of the patch, so
    (g^LOD, 1_K) = p_K, i.e. g^LOD = p / |K|.
    """
    region = patch_.region
    a = _coefficient_on(patch_, coefficient)
    bv = b.on(region) if isinstance(b, Bubble) else np.asarray(b, dtype=float)
    free = region.interior_nodes
    op = fem.assemble_stiffness(region, a, free)
    Bc = fem.constraint_matrix(region, free)
    x, p = fem.solve_saddle_point(op, Bc, op.matrix @ bv[free])
    phi = fem.FineFunction(region, bv - x.values)
    return phi, x, p


def mean_lod_source(patch_: Patch, field_samples, seeds: SeedScheme | None = None,
                    law: FieldLaw | None = None) -> LODSourceTerm:
    """Streamed mean of the per-sample multipliers and its L2-normalized P0 source term."""
    region = patch_.region
    if isinstance(field_samples, (int, np.integer)):
        if seeds is None:
            raise ValueError("seeds are required to draw samples")
        law = law or FieldLaw()
        field_samples = (sample_field(region.spec, law, seeds, i) for i in range(int(field_samples)))
    b = bubble(region.spec, patch_.center)
    acc = RunningMean()
    ps = []
    for i, sample in enumerate(field_samples):
        try:
            _, _, p = lod_correction(patch_, sample, b)
        except fem.SolverError as exc:
            raise fem.SolverError(f"sample {i}: {exc}", residual=exc.residual) from exc
        ps.append(p)
        acc.add(p)
    if acc.count == 0:
        raise ValueError("no coefficient samples")
    vol = region.element_volume
    g = acc.mean / vol
    nrm = np.linalg.norm(g) * np.sqrt(vol)
    if not nrm > 0:
        raise ValueError("mean LOD source term vanishes")
    return LODSourceTerm(patch_.center, ps, g, LocalSourceTerm(patch_.center, g / nrm, vol))


def multiplier_from_response(R_D: np.ndarray, center_local: int, element_volume: float) -> np.ndarray:
    """p = S^-1 e_T with S = B A^-1 B^T = R_D / |K| (scaled projection response matrix)."""
    e = np.zeros(R_D.shape[0])
    e[center_local] = 1.0
    return element_volume * scipy.linalg.solve(R_D, e, assume_a="pos")
