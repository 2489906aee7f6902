import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from oracles import dense_mass, dense_stiffness

from stochslod import fem
from stochslod.grid import build_hierarchy, domain, patch, project_p0


def test_stiffness_1d_single_node():
    r = domain(build_hierarchy(1, 1, 1, 1))
    assert fem.assemble_stiffness(r, 1.0).matrix.toarray().tolist() == [[4.0]]


def test_stiffness_2d_single_node():
    r = domain(build_hierarchy(2, 1, 1, 1))
    A = fem.assemble_stiffness(r, 1.0).matrix.toarray()
    assert A.shape == (1, 1)
    assert np.isclose(A[0, 0], 8 / 3, rtol=0, atol=1e-15)


def test_stiffness_bilinear_and_positive():
    r = domain(build_hierarchy(2, 1, 2, 3))
    a = np.random.default_rng(0).uniform(0.1, 1, 64)
    A1 = fem.assemble_stiffness(r, a).matrix
    A2 = fem.assemble_stiffness(r, 2 * a).matrix
    assert np.array_equal((2 * A1).toarray(), A2.toarray())
    assert (A1 - A1.T).nnz == 0
    with pytest.raises(ValueError):
        fem.assemble_stiffness(r, np.zeros(64))


@pytest.mark.parametrize("d", [1, 2])
def test_stiffness_matches_loop_assembly(d):
    s = build_hierarchy(d, 1, 2, 3 if d == 2 else 5)
    r = domain(s)
    a = np.random.default_rng(1).uniform(0.1, 1, int(np.prod(r.fine_shape)))
    full = dense_stiffness(r.node_shape, s.h, a)
    assert np.allclose(fem.full_matrix(r, a).toarray(), full, atol=1e-13)
    I = r.interior_nodes
    assert np.allclose(fem.assemble_stiffness(r, a).matrix.toarray(), full[np.ix_(I, I)], atol=1e-13)
    assert np.allclose(fem.full_matrix(r, kind="mass").toarray(), dense_mass(r.node_shape, s.h), atol=1e-15)


def test_load_examples():
    s = build_hierarchy(1, 2, 3, 4)
    r = domain(s)
    assert np.allclose(fem.assemble_load_p0(r, 1.0), s.h)
    assert not np.any(fem.assemble_load_p0(r, 0.0))
    g = np.zeros(4)
    g[1] = 1.0
    full = fem.load_matrix(r) @ g
    nodes = np.flatnonzero(full)
    assert nodes.min() >= 4 and nodes.max() <= 8  # closure of element 1 is nodes 4..8


def test_load_function_midpoint_rule():
    s = build_hierarchy(1, 1, 1, 2)
    r = domain(s)
    b = fem.assemble_load_function(r, lambda x: x)
    # node 1/4: cells (0,1/4) and (1/4,1/2), midpoints 1/8 and 3/8, weight h/2 each
    assert np.isclose(b[0], (1 / 8 + 3 / 8) * s.h / 2)


@pytest.mark.parametrize("logh", [2, 3, 5, 7])
def test_dirichlet_1d_midpoint_value(logh):
    s = build_hierarchy(1, 1, 1, logh)
    r = domain(s)
    op = fem.assemble_stiffness(r, 1.0)
    load = fem.assemble_load_p0(r, 1.0)
    u = fem.solve_dirichlet(op, load)
    ref = np.linalg.solve(op.matrix.toarray(), load)
    assert np.max(np.abs(u.values[op.free] - ref)) <= 1e-10
    assert abs(u.values[2 ** (logh - 1)] - 0.125) <= 1e-10
    assert u.values[0] == 0 and u.values[-1] == 0


def test_dirichlet_zero_load():
    r = domain(build_hierarchy(2, 1, 1, 3))
    op = fem.assemble_stiffness(r, 1.0)
    assert not np.any(fem.solve_dirichlet(op, np.zeros(op.free.size)).values)


def test_dirichlet_small_patch_dense():
    s = build_hierarchy(2, 2, 3, 3)
    p = patch(s, (0, 1), 1)
    a = np.random.default_rng(2).uniform(0.1, 1, int(np.prod(p.region.fine_shape)))
    op = fem.assemble_stiffness(p.region, a)
    assert op.free.size <= 50
    b = np.random.default_rng(3).standard_normal(op.free.size)
    u = fem.solve_dirichlet(op, b)
    ref = np.linalg.solve(op.matrix.toarray(), b)
    assert np.max(np.abs(u.values[op.free] - ref)) <= 1e-10 * (1 + np.max(np.abs(ref)))
    assert not np.any(u.values[p.region.node_classes != 0])


def test_harmonic_extension_constant():
    s = build_hierarchy(2, 3, 4, 5)
    p = patch(s, (3, 4), 1)
    a = np.random.default_rng(4).uniform(0.1, 1, int(np.prod(p.region.fine_shape)))
    ext = fem.harmonic_extension(p.region, a, np.full(p.region.boundary_nodes.size, 2.5))
    assert np.allclose(ext.values, 2.5, atol=1e-12)


def test_harmonic_extension_1d_affine():
    s = build_hierarchy(1, 3, 3, 6)
    p = patch(s, 3, 1)
    ext = fem.harmonic_extension(p.region, 1.0, np.array([0.0, 1.0]))
    assert np.allclose(ext.values, np.linspace(0, 1, p.region.node_shape[0]), atol=1e-12)


def test_harmonic_extension_dense_oracle():
    s = build_hierarchy(2, 2, 3, 3)
    p = patch(s, (1, 2), 1)
    reg = p.region
    rng = np.random.default_rng(5)
    a = rng.uniform(0.1, 1, int(np.prod(reg.fine_shape)))
    data = rng.standard_normal(reg.boundary_nodes.size)
    ext = fem.harmonic_extension(reg, a, data)
    A = dense_stiffness(reg.node_shape, s.h, a)
    I, B = reg.interior_nodes, reg.boundary_nodes
    assert I.size <= 50
    ref = np.linalg.solve(A[np.ix_(I, I)], -A[np.ix_(I, B)] @ data)
    assert np.max(np.abs(ext.values[I] - ref)) <= 1e-10
    assert np.array_equal(ext.values[B], data)
    assert not np.any(ext.values[reg.gamma_nodes])
    assert np.max(np.abs((A @ ext.values)[I])) <= 1e-10


def test_harmonic_extension_1d_max_principle():
    s = build_hierarchy(1, 3, 5, 7)
    p = patch(s, 4, 2)
    a = np.random.default_rng(6).uniform(0.1, 1, p.region.fine_shape[0])
    ext = fem.harmonic_extension(p.region, a, np.array([-0.3, 0.8]))
    assert ext.values.min() >= -0.3 - 1e-12 and ext.values.max() <= 0.8 + 1e-12


def _kkt_case(seed=7):
    s = build_hierarchy(1, 3, 4, 5)
    p = patch(s, 3, 1)
    a = np.random.default_rng(seed).uniform(0.1, 1, p.region.fine_shape[0])
    op = fem.assemble_stiffness(p.region, a)
    B = fem.constraint_matrix(p.region)
    return p, op, B


def test_saddle_zero_rhs():
    _, op, B = _kkt_case()
    x, q = fem.solve_saddle_point(op, B, np.zeros(op.free.size))
    assert not np.any(x.values) and not np.any(q)


def test_saddle_without_constraints():
    _, op, _ = _kkt_case()
    b = np.random.default_rng(8).standard_normal(op.free.size)
    x, q = fem.solve_saddle_point(op, None, b)
    assert q.size == 0
    assert np.allclose(x.values, fem.solve_dirichlet(op, b).values, atol=1e-14)


def test_saddle_dense_kkt():
    _, op, B = _kkt_case()
    A = op.matrix.toarray()
    Bd = B.toarray()
    b = np.random.default_rng(9).standard_normal(op.free.size)
    n, N = A.shape[0], Bd.shape[0]
    sol = np.linalg.solve(np.block([[A, Bd.T], [Bd, np.zeros((N, N))]]), np.concatenate([b, np.zeros(N)]))
    x, q = fem.solve_saddle_point(op, B, b)
    assert np.max(np.abs(x.values[op.free] - sol[:n])) <= 1e-8 * np.max(np.abs(sol[:n]))
    assert np.max(np.abs(q - sol[n:])) <= 1e-8 * np.max(np.abs(sol[n:]))
    assert np.max(np.abs(Bd @ x.values[op.free])) <= 1e-10


def test_saddle_rank_deficient():
    _, op, B = _kkt_case()
    Bd = B.toarray()
    with pytest.raises(fem.RankDeficientError):
        fem.solve_saddle_point(op, np.vstack([Bd, Bd[:1]]), np.ones(op.free.size))


def test_constraint_rows_are_element_averages():
    s = build_hierarchy(2, 2, 3, 4)
    reg = patch(s, (1, 1), 1).region
    B = fem.projection_matrix(reg, scaled=False)
    n = int(np.prod(reg.node_shape))
    assert np.allclose(B @ np.full(n, 3.0), 3.0, atol=1e-14)
    v = np.random.default_rng(11).standard_normal(n)
    ref = project_p0(v.reshape(reg.node_shape), s.ratio("coarse", "fine")).ravel()
    assert np.allclose(B @ v, ref, atol=1e-14)
    scaled = fem.projection_matrix(reg)
    assert np.allclose(scaled.toarray(), B.toarray() * np.sqrt(reg.element_volume), atol=1e-15)


def test_norms_examples():
    r = domain(build_hierarchy(1, 1, 1, 4))
    n = r.node_shape[0]
    assert np.isclose(fem.norms(fem.FineFunction(r, np.ones(n)))["l2"], 1.0, atol=1e-14)
    assert np.isclose(fem.norms(fem.FineFunction(r, np.linspace(0, 1, n)))["h1semi"], 1.0, atol=1e-14)


@pytest.mark.parametrize("logh", [1, 2])
def test_norms_hat(logh):
    # closed form for a hat of height 1 with support (1/2 - h, 1/2 + h)
    r = domain(build_hierarchy(1, 1, 1, logh))
    h = r.spec.h
    v = np.zeros(r.node_shape[0])
    v[len(v) // 2] = 1.0
    nr = fem.norms(fem.FineFunction(r, v))
    assert np.isclose(nr["h1semi"] ** 2, 2 / h, atol=1e-12)
    assert np.isclose(nr["l2"] ** 2, 2 * h / 3, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(d=st.integers(1, 2), seed=st.integers(0, 2 ** 31), logh=st.integers(2, 3))
def test_dense_equivalence_and_energy(d, seed, logh):
    logh = logh + (4 if d == 1 else 0)
    s = build_hierarchy(d, 1, 1, logh)
    r = domain(s)
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.1, 1, int(np.prod(r.fine_shape)))
    op = fem.assemble_stiffness(r, a)
    assert op.free.size <= 200
    b = rng.standard_normal(op.free.size)
    u = fem.solve_dirichlet(op, b)
    A = dense_stiffness(r.node_shape, s.h, a)
    I = r.interior_nodes
    ref = np.linalg.solve(A[np.ix_(I, I)], b)
    x = u.values[I]
    assert np.max(np.abs(x - ref)) <= 1e-10 * (1 + np.max(np.abs(ref)))
    assert np.max(np.abs(A[np.ix_(I, I)] @ x - b)) <= 1e-10 * (1 + np.max(np.abs(b)))
    assert fem.norms(u)["h1semi"] ** 2 <= (b @ x) / 0.1 * (1 + 1e-12)


@pytest.mark.skipif("cholmod" not in fem.BACKENDS or fem._cholmod_analyze is None, reason="no CHOLMOD")
def test_backends_agree():
    s = build_hierarchy(2, 2, 4, 5)
    r = domain(s)
    a = np.random.default_rng(10).uniform(0.1, 1, int(np.prod(r.fine_shape)))
    op = fem.assemble_stiffness(r, a)
    b = np.ones(op.free.size)
    old = fem.get_backend()
    try:
        fem.set_backend("superlu")
        x1 = fem.solve_dirichlet(op, b).values
        fem.set_backend("cholmod")
        x2 = fem.solve_dirichlet(op, b).values
    finally:
        fem.set_backend(old)
    assert np.max(np.abs(x1 - x2)) <= 1e-10 * np.max(np.abs(x1))


def test_solver_error_on_indefinite():
    r = domain(build_hierarchy(1, 1, 1, 3))
    op = fem.assemble_stiffness(r, 1.0)
    op.matrix = -op.matrix
    with pytest.raises(fem.SolverError):
        fem.solve_dirichlet(op, np.ones(op.free.size))
