"""Q1 finite elements on boxes of fine cells with cellwise constant coefficients.

Element matrices are integrated exactly (tensor products of the 1D P1 stiffness
and mass matrices), loads of piecewise constant sources exactly, loads of smooth
sources by the per-cell midpoint rule.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Region

log = logging.getLogger(__name__)

try:  # optional, several times faster than SuperLU on the 2D patch systems
    from sksparse.cholmod import CholmodNotPositiveDefiniteError
    from sksparse.cholmod import analyze as _cholmod_analyze
except ImportError:  # pragma: no cover - depends on the environment
    _cholmod_analyze = None

BACKENDS = ("cholmod", "superlu")
_backend = "cholmod" if _cholmod_analyze is not None else "superlu"


class SolverError(RuntimeError):
    """A linear solve failed or missed its residual tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class RankDeficientError(SolverError):
    pass


def set_backend(name: str) -> None:
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "cholmod" and _cholmod_analyze is None:
        raise ValueError("scikit-sparse is not installed")
    _backend = name


def get_backend() -> str:
    return _backend


class Factor:
    """Sparse SPD factorization; call it to solve."""

    def __init__(self, A: sp.spmatrix, symbolic=None):
        A = sp.csc_matrix(A)
        self.shape = A.shape
        self.symbolic = None
        if A.shape[0] == 0:
            self._solve = lambda b: np.zeros_like(b, dtype=float)
            return
        if _backend == "cholmod":
            if symbolic is None:
                symbolic = _cholmod_analyze(A, mode="supernodal", ordering_method="best")
            try:
                f = symbolic.cholesky(A)
            except CholmodNotPositiveDefiniteError as exc:
                raise SolverError(f"matrix is not positive definite: {exc}") from exc
            self.symbolic = symbolic
            self._solve = f
        else:
            try:
                lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
            except RuntimeError as exc:
                raise SolverError(f"factorization failed: {exc}") from exc
            self._solve = lu.solve

    def __call__(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.ndim == 2 and b.shape[1] == 0:
            return np.zeros(b.shape)
        return np.asarray(self._solve(b), dtype=float)


# --- element matrices -------------------------------------------------------

def _local_1d(h: float):
    S = np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
    M = np.array([[2.0, 1.0], [1.0, 2.0]]) * h / 6.0
    return S, M


@lru_cache(maxsize=None)
def local_stiffness(d: int, h: float) -> np.ndarray:
    """Exact Q1 stiffness of a cube cell of side h, corners in C order."""
    S, M = _local_1d(h)
    K = np.zeros((2 ** d, 2 ** d))
    for ax in range(d):
        term = np.ones((1, 1))
        for j in range(d):
            term = np.kron(term, S if j == ax else M)
        K += term
    return K


@lru_cache(maxsize=None)
def local_mass(d: int, h: float) -> np.ndarray:
    _, M = _local_1d(h)
    out = np.ones((1, 1))
    for _ in range(d):
        out = np.kron(out, M)
    return out


def cell_nodes(node_shape: tuple[int, ...]) -> np.ndarray:
    """(n_cells, 2**d) flat node indices of the corners of every cell."""
    d = len(node_shape)
    cells = [s - 1 for s in node_shape]
    grids = np.meshgrid(*[np.arange(c) for c in cells], indexing="ij")
    base = [g.ravel() for g in grids]
    corners = []
    for off in np.ndindex(*(2,) * d):
        idx = tuple(b + o for b, o in zip(base, off))
        corners.append(np.ravel_multi_index(idx, node_shape))
    return np.stack(corners, axis=1)


class AssemblyPlan:
    """Precomputed sparsity of a cellwise-weighted Q1 form restricted to node sets.

    `matrix(a)` returns sum_cells a_cell * (local form) restricted to rows/cols,
    as CSC, without re-sorting the pattern for every coefficient.
    """

    def __init__(self, node_shape, h: float, rows, cols=None, kind: str = "stiffness"):
        node_shape = tuple(node_shape)
        d = len(node_shape)
        n_nodes = int(np.prod(node_shape))
        rows = np.asarray(rows, dtype=int)
        cols = rows if cols is None else np.asarray(cols, dtype=int)
        self.shape = (rows.size, cols.size)
        self.symmetric = cols is rows
        local = local_stiffness(d, h) if kind == "stiffness" else local_mass(d, h)
        conn = cell_nodes(node_shape)
        n_cells, nloc = conn.shape
        rpos = np.full(n_nodes, -1)
        rpos[rows] = np.arange(rows.size)
        cpos = np.full(n_nodes, -1)
        cpos[cols] = np.arange(cols.size)
        I = rpos[np.repeat(conn, nloc, axis=1)].ravel()
        J = cpos[np.tile(conn, (1, nloc))].ravel()
        V = np.tile(local.ravel(), n_cells)
        C = np.repeat(np.arange(n_cells), nloc * nloc)
        keep = (I >= 0) & (J >= 0) & (V != 0.0)
        I, J, V, C = I[keep], J[keep], V[keep], C[keep]
        key = J.astype(np.int64) * max(rows.size, 1) + I
        uniq, slot = np.unique(key, return_inverse=True)
        self.indices = (uniq % max(rows.size, 1)).astype(np.int32)
        colidx = uniq // max(rows.size, 1)
        self.indptr = np.zeros(cols.size + 1, dtype=np.int32)
        np.add.at(self.indptr, colidx + 1, 1)
        self.indptr = np.cumsum(self.indptr).astype(np.int32)
        self.scatter = sp.csr_matrix((V, (slot, C)), shape=(uniq.size, n_cells))
        self.symbolic = None

    def matrix(self, a) -> sp.csc_matrix:
        a = np.broadcast_to(np.asarray(a, dtype=float), (self.scatter.shape[1],))
        data = self.scatter @ a
        return sp.csc_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)

    def factor(self, a) -> Factor:
        f = Factor(self.matrix(a), self.symbolic)
        if self.symbolic is None:
            self.symbolic = f.symbolic
        return f


# --- operators and functions ---------------------------------------------------

@dataclass
class SparseOperator:
    """SPD matrix over the free nodes `free` (flat indices into the region's nodes)."""

    region: Region
    matrix: sp.csc_matrix
    free: np.ndarray


@dataclass
class FineFunction:
    region: Region
    values: np.ndarray  # all nodes of the region, flat C order

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.region.node_shape)


def _check_coefficient(region: Region, coefficient) -> np.ndarray:
    a = np.broadcast_to(np.asarray(coefficient, dtype=float),
                        (int(np.prod(region.fine_shape)),)).copy()
    if np.any(~(a > 0)):
        raise ValueError("coefficient values must be strictly positive")
    return a


def assemble_stiffness(region: Region, coefficient, free=None) -> SparseOperator:
    """Stiffness matrix (A grad u, grad v) over `free` nodes (default: box interior)."""
    a = _check_coefficient(region, coefficient)
    free = region.interior_nodes if free is None else np.asarray(free, dtype=int)
    plan = AssemblyPlan(region.node_shape, region.spec.h, free)
    return SparseOperator(region, plan.matrix(a), free)


def full_matrix(region: Region, coefficient=1.0, kind: str = "stiffness") -> sp.csc_matrix:
    nodes = np.arange(int(np.prod(region.node_shape)))
    plan = AssemblyPlan(region.node_shape, region.spec.h, nodes, kind=kind)
    return plan.matrix(coefficient)


def load_matrix(region: Region) -> sp.csr_matrix:
    """(n_nodes, N) matrix with column K = exact load of the indicator of local element K."""
    d = region.spec.d
    conn = cell_nodes(region.node_shape)
    elem = region.fine_cell_to_local_element()
    w = region.spec.h ** d / 2 ** d
    n_nodes = int(np.prod(region.node_shape))
    rows = conn.ravel()
    cols = np.repeat(elem, conn.shape[1])
    return sp.csr_matrix((np.full(rows.size, w), (rows, cols)), shape=(n_nodes, region.N))


def assemble_load_p0(region: Region, g, free=None) -> np.ndarray:
    """Load (g, phi_i) for g piecewise constant on the region's coarse elements."""
    free = region.interior_nodes if free is None else np.asarray(free, dtype=int)
    g = np.broadcast_to(np.asarray(g, dtype=float), (region.N,))
    return (load_matrix(region) @ g)[free]


def assemble_load_function(region: Region, f, free=None) -> np.ndarray:
    """Load (f, phi_i) with f evaluated at the midpoint of every fine cell."""
    free = region.interior_nodes if free is None else np.asarray(free, dtype=int)
    spec = region.spec
    h = spec.h
    r = spec.ratio("coarse", "fine")
    axes = [(np.arange(s) + lo * r + 0.5) * h for s, lo in zip(region.fine_shape, region.lo)]
    mids = np.meshgrid(*axes, indexing="ij")
    fv = np.asarray(f(*mids), dtype=float) * np.ones(region.fine_shape)
    conn = cell_nodes(region.node_shape)
    w = h ** spec.d / 2 ** spec.d
    out = np.zeros(int(np.prod(region.node_shape)))
    np.add.at(out, conn.ravel(), np.repeat(fv.ravel() * w, conn.shape[1]))
    return out[free]


def projection_matrix(region: Region, nodes=None, scaled: bool = True) -> sp.csr_matrix:
    """Pi onto P0 of the region's coarse elements as an (N, len(nodes)) matrix.

    Row K computes |K|^-1 (v, 1_K); with `scaled` the rows are multiplied by
    sqrt|K| so the Euclidean norm of the result is the L2 norm of the projection.
    """
    L = load_matrix(region).T.tocsr()
    vol = region.element_volume
    L = L * (vol ** -0.5 if scaled else 1.0 / vol)
    if nodes is not None:
        L = L[:, np.asarray(nodes, dtype=int)]
    return sp.csr_matrix(L)


def constraint_matrix(region: Region, free=None) -> sp.csr_matrix:
    """Element averages |K|^-1 int_K v over the region's coarse elements, on `free` nodes."""
    free = region.interior_nodes if free is None else free
    return projection_matrix(region, free, scaled=False)


def _residual_check(A, x, b, tol, what):
    res = np.max(np.abs(A @ x - b)) if b.size else 0.0
    bound = tol * (1.0 + np.max(np.abs(b)) if b.size else 1.0)
    if not np.isfinite(res) or res > bound:
        raise SolverError(f"{what}: residual {res:.3e} exceeds {bound:.3e}", residual=res)
    return res


def solve_dirichlet(op: SparseOperator, load, boundary=None, tol: float = 1e-10) -> FineFunction:
    """Solve op x = load on the free nodes; the remaining nodes carry `boundary` (default 0)."""
    load = np.asarray(load, dtype=float)
    x = Factor(op.matrix)(load)
    _residual_check(op.matrix, x, load, tol, "Dirichlet solve")
    n_nodes = int(np.prod(op.region.node_shape))
    values = np.zeros(n_nodes) if boundary is None else np.array(boundary, dtype=float)
    values[op.free] = x
    return FineFunction(op.region, values)


def harmonic_extension(region: Region, coefficient, boundary_values, tol: float = 1e-10) -> FineFunction:
    """A-harmonic extension of data on the box boundary off the domain (zero on Gamma).

    `boundary_values` is ordered like `region.boundary_nodes`.
    """
    a = _check_coefficient(region, coefficient)
    inner = region.interior_nodes
    bnd = region.boundary_nodes
    b = np.asarray(boundary_values, dtype=float)
    if b.shape != bnd.shape:
        raise ValueError(f"expected {bnd.size} boundary values, got {b.shape}")
    A_II = AssemblyPlan(region.node_shape, region.spec.h, inner).matrix(a)
    A_IB = AssemblyPlan(region.node_shape, region.spec.h, inner, bnd).matrix(a)
    rhs = -(A_IB @ b)
    x = Factor(A_II)(rhs)
    _residual_check(A_II, x, rhs, tol, "harmonic extension")
    values = np.zeros(int(np.prod(region.node_shape)))
    values[bnd] = b
    values[inner] = x
    return FineFunction(region, values)


def solve_saddle_point(op: SparseOperator, constraints, rhs, rhs_constraint=None,
                       tol: float = 1e-8, rank_tol: float = 1e-12):
    """Solve [A B^T; B 0] [x; p] = [rhs; rhs_constraint] by the Schur complement B A^-1 B^T.

    Returns (FineFunction x, multipliers p).
    """
    A = op.matrix
    rhs = np.asarray(rhs, dtype=float)
    B = sp.csr_matrix(constraints) if constraints is not None else sp.csr_matrix((0, A.shape[0]))
    n_c = B.shape[0]
    q = np.zeros(n_c) if rhs_constraint is None else np.asarray(rhs_constraint, dtype=float)
    F = Factor(A)
    y = F(rhs)
    if n_c:
        Y = F(B.T.toarray())
        S = B @ Y
        S = 0.5 * (S + S.T)
        ev = np.linalg.eigvalsh(S)
        if ev[0] <= rank_tol * max(ev[-1], np.finfo(float).tiny):
            raise RankDeficientError(f"constraints are rank deficient (eigenvalues {ev[0]:.3e}, {ev[-1]:.3e})")
        p = scipy.linalg.solve(S, B @ y - q, assume_a="pos")
        x = y - Y @ p
    else:
        p = np.zeros(0)
        x = y
    r1 = A @ x + B.T @ p - rhs
    r2 = B @ x - q
    scale = 1.0 + np.max(np.abs(rhs), initial=0.0) + np.max(np.abs(q), initial=0.0)
    res = max(np.max(np.abs(r1), initial=0.0), np.max(np.abs(r2), initial=0.0))
    if res > tol * scale:
        raise SolverError(f"saddle point residual {res:.3e}", residual=res)
    values = np.zeros(int(np.prod(op.region.node_shape)))
    values[op.free] = x
    return FineFunction(op.region, values), p


def norms(fn: FineFunction) -> dict[str, float]:
    """Exact L2 norm and H1 seminorm of the Q1 interpolant of `fn`."""
    v = np.asarray(fn.values, dtype=float)
    M = full_matrix(fn.region, kind="mass")
    K = full_matrix(fn.region, kind="stiffness")
    return {"l2": float(np.sqrt(max(v @ (M @ v), 0.0))),
            "h1semi": float(np.sqrt(max(v @ (K @ v), 0.0)))}
