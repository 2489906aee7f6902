"""Dyadic Cartesian mesh hierarchy on the unit box, coarse patches and P0 projections.

Elements and nodes are indexed 0-based and lexicographically (C order) by their
per-axis multi-index, axis 0 first.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np


class ConfigurationError(ValueError):
    """Invalid mesh, patch or experiment configuration."""


@dataclass(frozen=True)
class GridSpec:
    """Nested meshes with 2**log_H coarse, 2**log_eps coefficient and 2**log_h fine cells per axis."""

    d: int
    log_H: int
    log_eps: int
    log_h: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ConfigurationError(f"dimension must be 1 or 2, got {self.d}")
        if not 1 <= self.log_H <= self.log_eps <= self.log_h:
            raise ConfigurationError(
                "need 1 <= log_H <= log_eps <= log_h, got "
                f"({self.log_H}, {self.log_eps}, {self.log_h})"
            )

    @property
    def H(self) -> float:
        return 2.0 ** -self.log_H

    @property
    def eps(self) -> float:
        return 2.0 ** -self.log_eps

    @property
    def h(self) -> float:
        return 2.0 ** -self.log_h

    def n(self, level: str) -> int:
        """Elements per axis at level 'coarse', 'eps' or 'fine'."""
        return 2 ** self._log(level)

    def count(self, level: str) -> int:
        return self.n(level) ** self.d

    def shape(self, level: str) -> tuple[int, ...]:
        return (self.n(level),) * self.d

    def ratio(self, coarse: str, fine: str) -> int:
        """Number of `fine`-level cells per axis inside one `coarse`-level cell."""
        r = self._log(fine) - self._log(coarse)
        if r < 0:
            raise ConfigurationError(f"level {fine!r} is coarser than {coarse!r}")
        return 2 ** r

    def _log(self, level: str) -> int:
        try:
            return {"coarse": self.log_H, "eps": self.log_eps, "fine": self.log_h}[level]
        except KeyError:
            raise ConfigurationError(f"unknown level {level!r}") from None

    @property
    def node_shape(self) -> tuple[int, ...]:
        return (self.n("fine") + 1,) * self.d

    def element_index(self, T, level: str = "coarse") -> tuple[int, ...]:
        """Multi-index of element `T` (flat index or multi-index), validated."""
        n = self.n(level)
        if np.ndim(T) == 0:
            T = int(T)
            if not 0 <= T < n ** self.d:
                raise ConfigurationError(f"element {T} out of range at level {level!r}")
            return tuple(int(i) for i in np.unravel_index(T, (n,) * self.d))
        T = tuple(int(i) for i in T)
        if len(T) != self.d or any(not 0 <= i < n for i in T):
            raise ConfigurationError(f"element {T} out of range at level {level!r}")
        return T

    def flat_index(self, T, level: str = "coarse") -> int:
        return int(np.ravel_multi_index(self.element_index(T, level), self.shape(level)))


def build_hierarchy(d: int, log_H: int, log_eps: int, log_h: int) -> GridSpec:
    return GridSpec(int(d), int(log_H), int(log_eps), int(log_h))


@dataclass(frozen=True)
class Region:
    """Axis-aligned box made of whole coarse elements, lo <= index < hi on every axis."""

    spec: GridSpec
    lo: tuple[int, ...]
    hi: tuple[int, ...]

    @property
    def coarse_shape(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    @property
    def fine_shape(self) -> tuple[int, ...]:
        r = self.spec.ratio("coarse", "fine")
        return tuple(w * r for w in self.coarse_shape)

    @property
    def node_shape(self) -> tuple[int, ...]:
        return tuple(c + 1 for c in self.fine_shape)

    @property
    def is_whole_domain(self) -> bool:
        n = self.spec.n("coarse")
        return all(a == 0 and b == n for a, b in zip(self.lo, self.hi))

    @cached_property
    def elements(self) -> np.ndarray:
        """Global flat indices of the coarse elements, lexicographic order."""
        axes = [np.arange(a, b) for a, b in zip(self.lo, self.hi)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.ravel_multi_index(tuple(g.ravel() for g in grids), self.spec.shape("coarse"))

    @property
    def N(self) -> int:
        return int(np.prod(self.coarse_shape))

    @property
    def element_volume(self) -> float:
        return self.spec.H ** self.spec.d

    @property
    def volume(self) -> float:
        return self.N * self.element_volume

    @cached_property
    def node_classes(self) -> np.ndarray:
        """Per fine node of the box: 0 interior, 1 Dirichlet on the box boundary off
        the domain boundary, 2 on Gamma (box boundary lying on the domain boundary)."""
        spec = self.spec
        r = spec.ratio("coarse", "fine")
        nf = spec.n("fine")
        on_box = np.zeros(self.node_shape, dtype=bool)
        on_domain = np.zeros(self.node_shape, dtype=bool)
        for ax in range(spec.d):
            idx = np.arange(self.node_shape[ax])
            glob = self.lo[ax] * r + idx
            shape = [1] * spec.d
            shape[ax] = -1
            box = (idx == 0) | (idx == idx[-1])
            dom = (glob == 0) | (glob == nf)
            on_box |= box.reshape(shape)
            on_domain |= dom.reshape(shape)
        cls = np.where(on_box, 1, 0)
        cls[on_domain] = 2
        return cls.ravel()

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.node_classes == 0)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        """Box-boundary nodes not on the domain boundary."""
        return np.flatnonzero(self.node_classes == 1)

    @cached_property
    def gamma_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.node_classes == 2)

    @property
    def has_gamma(self) -> bool:
        return self.gamma_nodes.size > 0

    def fine_cell_slices(self) -> tuple[slice, ...]:
        r = self.spec.ratio("coarse", "fine")
        return tuple(slice(a * r, b * r) for a, b in zip(self.lo, self.hi))

    def fine_cell_to_local_element(self) -> np.ndarray:
        """Local (patch) coarse element index of every fine cell in the box, C order."""
        r = self.spec.ratio("coarse", "fine")
        axes = [np.arange(s) // r for s in self.fine_shape]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.ravel_multi_index(tuple(g.ravel() for g in grids), self.coarse_shape)


def domain(spec: GridSpec) -> Region:
    n = spec.n("coarse")
    return Region(spec, (0,) * spec.d, (n,) * spec.d)


@dataclass(frozen=True)
class Patch:
    """The ell-th order coarse neighbourhood of element `center`."""

    region: Region
    center: tuple[int, ...]
    ell: int

    @property
    def spec(self) -> GridSpec:
        return self.region.spec

    @property
    def elements(self) -> np.ndarray:
        return self.region.elements

    @property
    def N(self) -> int:
        return self.region.N

    @property
    def center_flat(self) -> int:
        return self.spec.flat_index(self.center)

    @property
    def center_local(self) -> int:
        """Position of the center element within `elements`."""
        off = tuple(c - a for c, a in zip(self.center, self.region.lo))
        return int(np.ravel_multi_index(off, self.region.coarse_shape))

    def layout_key(self) -> tuple:
        """Per-axis (offset of center, width, touches low side, touches high side).

        Two patches with equal keys are translates of each other with the same
        boundary situation."""
        n = self.spec.n("coarse")
        return tuple(
            (c - a, b - a, a == 0, b == n)
            for c, a, b in zip(self.center, self.region.lo, self.region.hi)
        )


def patch(spec: GridSpec, T, ell: int, *, allow_whole_domain: bool = False) -> Patch:
    """N^ell(T) clipped to the domain.

    On a Cartesian mesh the recursive closure of T is the box of elements within
    max-norm index distance ell, so it is formed directly.  A patch covering the
    whole domain is rejected unless explicitly allowed.
    """
    if ell < 1:
        raise ConfigurationError(f"oversampling order must be >= 1, got {ell}")
    center = spec.element_index(T)
    n = spec.n("coarse")
    lo = tuple(max(c - ell, 0) for c in center)
    hi = tuple(min(c + ell + 1, n) for c in center)
    region = Region(spec, lo, hi)
    if region.is_whole_domain and not allow_whole_domain:
        raise ConfigurationError(
            f"patch of order {ell} around {center} coincides with the whole domain"
        )
    return Patch(region, center, int(ell))


def neighbourhood(spec: GridSpec, elements, ell: int) -> np.ndarray:
    """Recursive closure N^ell(S) of a set of coarse elements (flat indices), sorted.

    Generic reference construction: N^1 adds every element touching the set.
    """
    shape = spec.shape("coarse")
    current = set(int(e) for e in np.atleast_1d(elements))
    offsets = list(itertools.product((-1, 0, 1), repeat=spec.d))
    for _ in range(ell):
        grown = set(current)
        for e in current:
            idx = np.unravel_index(e, shape)
            for off in offsets:
                nb = tuple(i + o for i, o in zip(idx, off))
                if all(0 <= i < s for i, s in zip(nb, shape)):
                    grown.add(int(np.ravel_multi_index(nb, shape)))
        current = grown
    return np.array(sorted(current), dtype=int)


def cell_averages(nodal: np.ndarray) -> np.ndarray:
    """Exact mean of the multilinear interpolant over every cell of a nodal grid."""
    out = np.asarray(nodal, dtype=float)
    for ax in range(out.ndim):
        lo = [slice(None)] * out.ndim
        hi = [slice(None)] * out.ndim
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        out = 0.5 * (out[tuple(lo)] + out[tuple(hi)])
    return out


def block_average(cells: np.ndarray, factor: int) -> np.ndarray:
    """Average cell values over blocks of `factor` cells per axis."""
    cells = np.asarray(cells, dtype=float)
    if factor == 1:
        return cells.copy()
    shape = []
    for s in cells.shape:
        if s % factor:
            raise ConfigurationError(f"{s} cells do not split into blocks of {factor}")
        shape += [s // factor, factor]
    blocks = cells.reshape(shape)
    return blocks.mean(axis=tuple(range(1, 2 * cells.ndim, 2)))


def project_p0(values: np.ndarray, factor: int, *, cellwise: bool = False) -> np.ndarray:
    """L2 projection onto piecewise constants on blocks of `factor` fine cells per axis.

    `values` are nodal Q1 values (one more entry per axis than cells) or, with
    `cellwise=True`, values of a function already piecewise constant on the cells.
    """
    values = np.asarray(values, dtype=float)
    cells = values if cellwise else cell_averages(values)
    return block_average(cells, factor)


def project_to_level(spec: GridSpec, values: np.ndarray, level: str = "coarse",
                     data_level: str = "fine") -> np.ndarray:
    """Pi onto P0 of the mesh at `level` for a global function given at `data_level`.

    Fine-level data are nodal Q1 values on the whole domain, any other data level
    means piecewise constant cell values of that mesh.
    """
    factor = spec.ratio(level, data_level)
    values = np.asarray(values, dtype=float)
    if data_level == "fine" and values.shape == spec.node_shape:
        return project_p0(values, factor)
    if values.shape != spec.shape(data_level):
        raise ConfigurationError(
            f"data of shape {values.shape} does not match level {data_level!r}"
        )
    return project_p0(values, factor, cellwise=True)


def weight_function(p: Patch, r: float) -> np.ndarray:
    """w_T(K) = (max-norm index distance between K and the center)**r, in patch order."""
    if r < 1:
        raise ConfigurationError(f"weight exponent must be >= 1, got {r}")
    reg = p.region
    axes = [np.arange(a, b) - c for a, b, c in zip(reg.lo, reg.hi, p.center)]
    grids = np.meshgrid(*axes, indexing="ij")
    dist = np.max(np.abs(np.stack([g.ravel() for g in grids])), axis=0).astype(float)
    return dist ** r
