import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochslod.grid import (ConfigurationError, GridSpec, build_hierarchy, cell_averages, domain,
                            neighbourhood, patch, project_p0, project_to_level, weight_function)


def test_hierarchy_full_scale():
    s = build_hierarchy(2, 3, 7, 10)
    assert s.count("coarse") == 64
    assert (s.H, s.eps, s.h) == (2 ** -3, 2 ** -7, 2 ** -10)


def test_hierarchy_equal_levels():
    s = build_hierarchy(1, 2, 2, 2)
    assert s.H == s.eps == s.h == 0.25


@pytest.mark.parametrize("args", [(1, 4, 3, 5), (3, 1, 2, 3), (2, 0, 1, 1), (1, 2, 3, 2)])
def test_hierarchy_rejects(args):
    with pytest.raises(ConfigurationError):
        build_hierarchy(*args)


def test_patch_examples():
    s = build_hierarchy(1, 3, 3, 3)
    assert patch(s, 3, 1).elements.tolist() == [2, 3, 4]
    assert patch(s, 0, 2).elements.tolist() == [0, 1, 2]
    s2 = build_hierarchy(2, 3, 3, 3)
    p = patch(s2, (3, 4), 2)
    assert p.N == 25


def test_patch_rejects_whole_domain_and_bad_order():
    s = build_hierarchy(2, 2, 3, 4)
    with pytest.raises(ConfigurationError):
        patch(s, (1, 1), 2)
    assert patch(s, (1, 1), 2, allow_whole_domain=True).region.is_whole_domain
    with pytest.raises(ConfigurationError):
        patch(s, 0, 0)
    with pytest.raises(ConfigurationError):
        patch(s, 16, 1)


@settings(max_examples=60, deadline=None)
@given(d=st.integers(1, 2), logH=st.integers(2, 4), ell=st.integers(1, 4), data=st.data())
def test_patch_matches_recursive_closure(d, logH, ell, data):
    s = build_hierarchy(d, logH, logH, logH)
    T = data.draw(st.integers(0, s.count("coarse") - 1))
    ref = neighbourhood(s, [T], ell)
    p = patch(s, T, ell, allow_whole_domain=True)
    assert p.elements.tolist() == ref.tolist()
    smaller = neighbourhood(s, [T], ell - 1)
    assert set(smaller) <= set(ref)
    # stable ordering
    assert patch(s, T, ell, allow_whole_domain=True).elements.tolist() == p.elements.tolist()


@pytest.mark.parametrize("d,ell", [(1, 1), (1, 3), (2, 1), (2, 2)])
def test_interior_patch_count(d, ell):
    s = build_hierarchy(d, 4, 4, 4)
    T = (8,) * d
    assert patch(s, T, ell).N == (2 * ell + 1) ** d


def test_node_classes():
    s = build_hierarchy(1, 2, 2, 3)
    p = patch(s, 0, 1)  # elements 0,1 -> nodes 0..4
    assert p.region.node_classes.tolist() == [2, 0, 0, 0, 1]
    p = patch(s, 1, 1)  # elements 0..2
    assert p.region.gamma_nodes.tolist() == [0]
    assert p.region.boundary_nodes.tolist() == [6]


def test_project_examples():
    s = build_hierarchy(1, 1, 2, 4)
    x = np.linspace(0, 1, s.n("fine") + 1)
    assert np.allclose(project_to_level(s, 5 + 0 * x), 5)
    assert np.allclose(project_to_level(s, x), [0.25, 0.75], atol=1e-15)
    s2 = GridSpec(2, 1, 1, 3)
    t = np.linspace(0, 1, 9)
    xy = np.multiply.outer(t, t)
    # xy on (0,1)^2 averages to 1/4
    assert np.isclose(project_p0(xy, 8).item(), 0.25, atol=1e-15)
    assert project_to_level(s2, xy).shape == (2, 2)


def test_project_rejects_bad_level():
    s = build_hierarchy(1, 2, 3, 4)
    with pytest.raises(ConfigurationError):
        project_to_level(s, np.zeros(4), level="eps", data_level="coarse")


def test_cell_averages_exact_for_bilinear():
    t = np.linspace(0, 1, 5)
    f = lambda x, y: 1 + 2 * x + 3 * y + 4 * x * y
    X, Y = np.meshgrid(t, t, indexing="ij")
    av = cell_averages(f(X, Y))
    mids = (t[:-1] + t[1:]) / 2
    MX, MY = np.meshgrid(mids, mids, indexing="ij")
    assert np.allclose(av, f(MX, MY), atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 2), levels=st.tuples(st.integers(1, 3), st.integers(0, 2)), seed=st.integers(0, 2 ** 31))
def test_projection_idempotent(d, levels, seed):
    logH, extra = levels
    s = build_hierarchy(d, logH, logH, logH + extra)
    u = np.random.default_rng(seed).standard_normal(s.node_shape)
    once = project_to_level(s, u)
    # the projection as a function on the fine cells, projected again
    r = s.ratio("coarse", "fine")
    fine = once
    for ax in range(d):
        fine = np.repeat(fine, r, axis=ax)
    twice = project_p0(fine, r, cellwise=True)
    assert np.max(np.abs(twice - once)) <= 1e-12 * (1 + np.max(np.abs(once)))


def test_weight_function_examples():
    s = build_hierarchy(2, 3, 3, 3)
    w = weight_function(patch(s, (4, 4), 2), 6).reshape(5, 5)
    assert w[2, 2] == 0
    assert set(w[1:4, 1:4].ravel()) - {0.0} == {1.0}
    assert np.all(w[[0, 4], :] == 64) and np.all(w[:, [0, 4]] == 64)
    s1 = build_hierarchy(1, 3, 3, 3)
    p = patch(s1, 4, 3)
    w1 = weight_function(p, 2)
    assert w1[p.center_local - 2] == 4
    assert w1[p.center_local] == 0
    with pytest.raises(ConfigurationError):
        weight_function(p, 0.5)


def test_domain_region():
    s = build_hierarchy(2, 2, 2, 3)
    r = domain(s)
    assert r.is_whole_domain and not r.boundary_nodes.size
    assert r.gamma_nodes.size == 4 * 8
