import numpy as np
import pytest
from oracles import dense_stiffness

from stochslod import fem
from stochslod.field import FieldLaw, SeedScheme
from stochslod.grid import ConfigurationError, build_hierarchy, domain, patch, project_to_level
from stochslod.lod import bubble, lod_correction, mean_lod_source, multiplier_from_response
from stochslod.slod import (PatchKernel, SamplingConfig, assemble_coarse_solution, build_model,
                            compute_crb, compute_local_basis)


def rand_coef(p, seed):
    return np.random.default_rng(seed).uniform(0.1, 1, int(np.prod(p.region.fine_shape)))


def test_bubble_peaks():
    b1 = bubble(build_hierarchy(1, 1, 2, 3), 0)
    assert b1.values.max() == 2.0 and b1.values[2] == 2.0
    b2 = bubble(build_hierarchy(2, 2, 3, 4), (1, 2))
    assert b2.values.max() == 4.0
    assert b2.values.min() >= 0


def test_bubble_requires_interior_nodes():
    with pytest.raises(ConfigurationError):
        bubble(build_hierarchy(1, 2, 2, 2), 0)


@pytest.mark.parametrize("d,levels", [(1, (2, 5)), (1, (3, 4)), (2, (2, 4)), (2, (1, 3))])
def test_bubble_projection_is_indicator(d, levels):
    s = build_hierarchy(d, levels[0], levels[1], levels[1])
    for T in range(s.count("coarse")):
        b = bubble(s, T)
        proj = project_to_level(s, b.on(domain(s)).reshape(s.node_shape)).ravel()
        target = np.zeros(s.count("coarse"))
        target[T] = 1.0
        assert np.max(np.abs(proj - target)) <= 1e-12
        nodes = b.values.reshape(b.region.node_shape)
        assert not np.any(nodes[0]) and not np.any(nodes[-1])


@pytest.mark.parametrize("d", [1, 2])
def test_bubble_poincare_ratio_is_stable(d):
    ratios = []
    for logH in (2, 3, 4):
        s = build_hierarchy(d, logH, logH, logH + 3)
        b = bubble(s, 0)
        nr = fem.norms(fem.FineFunction(b.region, b.values))
        ratios.append(nr["l2"] / (s.H * nr["h1semi"]))
    assert (max(ratios) - min(ratios)) / min(ratios) < 0.05


def _case(seed=0, T=3, ell=2):
    s = build_hierarchy(1, 3, 5, 7)
    p = patch(s, T, ell)
    return s, p, rand_coef(p, seed)


def test_correction_constraints_and_orthogonality():
    s, p, a = _case()
    phi, x, q = lod_correction(p, a, bubble(s, p.center))
    B = fem.projection_matrix(p.region, scaled=False)
    assert np.max(np.abs(B @ x.values)) <= 1e-10
    # W: the kernel of the element averages within H^1_0(D_T), spanned by the
    # rows of a null-space basis of the constraint matrix
    reg = p.region
    I = reg.interior_nodes
    A = dense_stiffness(reg.node_shape, s.h, a)
    Bc = B.toarray()[:, I]
    _, sv, Vt = np.linalg.svd(Bc)
    W = Vt[np.sum(sv > 1e-12):].T
    lhs = W.T @ (A[I] @ phi.values)
    assert np.max(np.abs(lhs)) <= 1e-8 * np.max(np.abs(A @ phi.values))


def test_correction_multiplier_recovery_two_routes():
    s, p, a = _case(1)
    phi, _, q = lod_correction(p, a, bubble(s, p.center))
    A = fem.full_matrix(p.region, a)
    for K_local, K in enumerate(p.elements):
        bK = bubble(s, K).on(p.region)
        via_energy = bK @ (A @ phi.values)  # a(phi, b_K)
        assert abs(via_energy - q[K_local]) <= 1e-8 * max(1.0, np.max(np.abs(q)))


def test_strong_divergence_is_p0():
    s, p, a = _case(2)
    phi, _, q = lod_correction(p, a, bubble(s, p.center))
    reg = p.region
    op = fem.assemble_stiffness(reg, a)
    residual = op.matrix @ phi.values[op.free]
    Bc = fem.constraint_matrix(reg)
    assert np.max(np.abs(residual - Bc.T @ q)) <= 1e-8 * np.max(np.abs(residual))
    # (g^LOD, phi_i) with g^LOD = q / |K| is the same vector
    g = q / reg.element_volume
    assert np.allclose(fem.assemble_load_p0(reg, g), residual, atol=1e-8 * np.max(np.abs(residual)))


def test_zero_bubble():
    s, p, a = _case()
    phi, x, q = lod_correction(p, a, np.zeros(int(np.prod(p.region.node_shape))))
    assert not np.any(phi.values) and not np.any(q)


def test_linearity_in_bubble():
    s, p, a = _case(3)
    b = bubble(s, p.center)
    _, _, q1 = lod_correction(p, a, b)
    _, _, q2 = lod_correction(p, a, 2 * b.on(p.region))
    assert np.allclose(q2, 2 * q1, rtol=1e-12, atol=1e-12)


def test_fast_multiplier_route_matches_saddle_point():
    for seed, T, ell in [(4, 3, 2), (5, 0, 2), (6, 7, 1)]:
        s, p, a = _case(seed, T, ell)
        _, _, q = lod_correction(p, a, bubble(s, p.center))
        _, R = PatchKernel(p).sample(a)
        fast = multiplier_from_response(R, p.center_local, p.region.element_volume)
        assert np.max(np.abs(fast - q)) <= 1e-8 * np.max(np.abs(q))


def test_mean_lod_source_deterministic_and_streaming():
    s = build_hierarchy(1, 3, 4, 6)
    p = patch(s, 4, 2)
    law = FieldLaw(0.3, 0.3)
    src = mean_lod_source(p, 5, SeedScheme(), law)
    _, _, q = lod_correction(p, np.full(p.region.fine_shape, 0.3), bubble(s, 4))
    assert np.array_equal(src.mean, q / s.H)
    assert abs(src.normalized.l2_norm() - 1) <= 1e-12
    samples = [rand_coef(p, k) for k in range(4)]
    src = mean_lod_source(p, samples)
    assert np.allclose(src.mean, np.mean(src.multipliers, axis=0) / s.H, rtol=1e-13)


def test_lod_pipeline_end_to_end():
    s = build_hierarchy(1, 3, 5, 7)
    cfg = SamplingConfig(M=8)
    model = build_model(s, 2, cfg, FieldLaw(), SeedScheme(9), source_kind="lod")
    assert np.isfinite(compute_crb(model))
    u = assemble_coarse_solution(model, lambda x: np.sin(np.pi * x))
    assert np.all(np.isfinite(u))
    # the fused source equals the reference-path mean multiplier direction
    p = patch(s, 5, 2)
    from stochslod.slod import PatchJob, patch_coefficient, reference_key
    key, g = reference_key(p, cfg.reuse)
    assert g == ((False,), False)
    job = PatchJob(s, p.center, 2, cfg, FieldLaw(), SeedScheme(9), key, "lod")
    samples = [patch_coefficient(job, p, i) for i in range(8)]
    src = mean_lod_source(p, samples)
    assert np.allclose(model.bases[5].source.values, src.normalized.values, atol=1e-10)
    basis = compute_local_basis(p, src.normalized, samples)
    assert np.allclose(model.bases[5].mean_response, basis.mean_response, atol=1e-10)
