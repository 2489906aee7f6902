"""Small oracle checks runnable without the test suite (``stochslod selftest``)."""
from __future__ import annotations

import numpy as np

from . import fem
from .field import FieldLaw, SeedScheme
from .grid import build_hierarchy, domain, patch, project_to_level
from .lod import bubble, lod_correction
from .slod import PatchKernel, SamplingConfig, assemble_coarse_solution, build_model


def _dense_dirichlet():
    rng = np.random.default_rng(0)
    s = build_hierarchy(2, 1, 2, 3)
    r = domain(s)
    a = rng.uniform(0.1, 1.0, int(np.prod(r.fine_shape)))
    op = fem.assemble_stiffness(r, a)
    b = rng.standard_normal(op.free.size)
    x = fem.solve_dirichlet(op, b).values[op.free]
    return np.max(np.abs(x - np.linalg.solve(op.matrix.toarray(), b))) / np.max(np.abs(x))


def _saddle():
    rng = np.random.default_rng(1)
    s = build_hierarchy(1, 3, 4, 6)
    p = patch(s, 3, 1)
    a = rng.uniform(0.1, 1.0, p.region.fine_shape[0])
    phi, x, pm = lod_correction(p, a, bubble(s, 3))
    op = fem.assemble_stiffness(p.region, a)
    B = fem.constraint_matrix(p.region).toarray()
    A = op.matrix.toarray()
    n, N = A.shape[0], B.shape[0]
    K = np.block([[A, B.T], [B, np.zeros((N, N))]])
    bv = bubble(s, 3).on(p.region)[op.free]
    sol = np.linalg.solve(K, np.concatenate([A @ bv, np.zeros(N)]))
    return max(np.max(np.abs(sol[:n] - x.values[op.free])), np.max(np.abs(sol[n:] - pm)) / np.max(np.abs(pm)))


def _projection():
    s = build_hierarchy(2, 2, 3, 5)
    b = bubble(s, (1, 2)).on(domain(s)).reshape(s.node_shape)
    target = np.zeros(s.shape("coarse"))
    target[1, 2] = 1.0
    return np.max(np.abs(project_to_level(s, b) - target))


def _deterministic_pipeline():
    s = build_hierarchy(1, 3, 3, 6)
    law = FieldLaw(1.0, 1.0)
    u = [assemble_coarse_solution(build_model(s, 1, SamplingConfig(M=M), law, SeedScheme(0)),
                                  lambda x: np.ones_like(x)) for M in (1, 5)]
    return 0.0 if np.array_equal(u[0], u[1]) else 1.0


def _fast_multiplier():
    rng = np.random.default_rng(2)
    s = build_hierarchy(1, 3, 4, 6)
    p = patch(s, 2, 2)
    a = rng.uniform(0.1, 1.0, p.region.fine_shape[0])
    _, _, pm = lod_correction(p, a, bubble(s, 2))
    _, R = PatchKernel(p).sample(a)
    e = np.zeros(p.N)
    e[p.center_local] = 1.0
    return np.max(np.abs(s.H * np.linalg.solve(R, e) - pm)) / np.max(np.abs(pm))


CHECKS = [
    ("dirichlet solve vs dense", _dense_dirichlet, 1e-10),
    ("saddle point vs dense KKT", _saddle, 1e-8),
    ("bubble projection is the indicator", _projection, 1e-12),
    ("deterministic coefficient, M=1 vs M=5 identical", _deterministic_pipeline, 0.0),
    ("multiplier from response matrix", _fast_multiplier, 1e-8),
]


def run_selftest(verbose: bool = True) -> bool:
    ok = True
    for name, fn, tol in CHECKS:
        err = fn()
        passed = bool(err <= tol)
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'} {name}: {err:.3e} (tol {tol:.0e})")
    return ok
