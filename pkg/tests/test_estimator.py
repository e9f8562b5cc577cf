"""Tests for the residual error estimator and the cluster reliability report."""

import numpy as np
import pytest
import scipy.linalg

from sapinvit import eigensolver as es, estimator, fem, linalg, mesh as msh


def setup(domain="unit_square", uniform=0, marked=()):
    m = msh.make_grid(domain)
    m = msh.uniform_refine(m, uniform)
    if marked:
        active = m.cells_at(m.level_count - 1)
        m = msh.refine(m, active[np.asarray(marked, dtype=np.int64)])
    dh = fem.distribute_dofs(m)
    return dh, fem.build_constraints(dh)


# ---------------------------------------------------------------------------
# per-cell estimates
# ---------------------------------------------------------------------------
def test_zero_vector_gives_zero_estimates():
    dh, cs = setup(uniform=1)
    est = estimator.estimate(dh, cs, 3.0, np.zeros(dh.n_dofs))
    assert est.total_sq == 0.0
    assert np.all(est.eta_t_sq == 0.0)


def test_globally_linear_field_has_zero_jumps():
    # the normal derivative of v(x, y) = x is continuous across every edge,
    # including the half-edges of coarse-fine interfaces
    for kwargs in (dict(uniform=2), dict(uniform=1, marked=[0])):
        dh, cs = setup(**kwargs)
        x, _ = dh.dof_points()
        est = estimator.estimate(dh, cs, 1.0, x)
        assert np.allclose(est.edge_j_sq, 0.0, atol=1e-14)
        assert np.allclose(est.eta_t_sq, est.volume_sq, atol=1e-14)


def test_center_hat_on_2x2_grid_hand_values():
    # unit square split 2x2, v = hat function of the center vertex, mu = 1.
    # Per cell: |T| ||v||^2 = (1/4) * (1/4)/9 = 1/144.  Each of the four
    # interior edges has endpoint jumps (0, 4), so J^2 = (1/2)^2 * 16/3 = 4/3.
    dh, cs = setup(uniform=1)
    x, y = dh.dof_points()
    v = np.zeros(dh.n_dofs)
    v[(x == 0.5) & (y == 0.5)] = 1.0
    est = estimator.estimate(dh, cs, 1.0, v)
    assert np.allclose(est.volume_sq, 1.0 / 144.0, rtol=1e-13)
    assert est.edge_j_sq.size == 4
    assert np.allclose(est.edge_j_sq, 4.0 / 3.0, rtol=1e-13)
    # both_full: every cell collects its two incident interior edges in full
    assert np.allclose(est.eta_t_sq, 1.0 / 144.0 + 8.0 / 3.0, rtol=1e-13)
    assert est.total_sq == pytest.approx(1.0 / 36.0 + 32.0 / 3.0, rel=1e-13)
    half = estimator.estimate(dh, cs, 1.0, v, attribution="half_each")
    assert half.total_sq == pytest.approx(1.0 / 36.0 + 16.0 / 3.0, rel=1e-13)
    assert np.allclose(half.eta_t_sq, 1.0 / 144.0 + 4.0 / 3.0, rtol=1e-13)


def test_attribution_identities_and_validation():
    dh, cs = setup(uniform=2)
    rng = np.random.default_rng(8)
    v = cs.expand(rng.standard_normal(cs.n_free))
    both = estimator.estimate(dh, cs, 2.5, v, attribution="both_full")
    half = estimator.estimate(dh, cs, 2.5, v, attribution="half_each")
    vol = both.volume_sq.sum()
    jsum = both.edge_j_sq.sum()
    assert both.total_sq == pytest.approx(vol + 2.0 * jsum, rel=1e-13)
    assert half.total_sq == pytest.approx(vol + jsum, rel=1e-13)
    with pytest.raises(ValueError):
        estimator.estimate(dh, cs, 2.5, v, attribution="all_to_left")


def test_estimates_scale_quadratically_in_the_vector():
    dh, cs = setup(uniform=1, marked=[2])
    rng = np.random.default_rng(12)
    v = cs.expand(rng.standard_normal(cs.n_free))
    base = estimator.estimate(dh, cs, 4.0, v)
    for alpha in (1e-6, 1.0, 1e6):
        scaled = estimator.estimate(dh, cs, 4.0, alpha * v)
        assert np.allclose(scaled.eta_t_sq, alpha ** 2 * base.eta_t_sq,
                           rtol=1e-12)


def test_estimate_accepts_eigenpair_and_free_vector():
    dh, cs = setup(uniform=1)
    rng = np.random.default_rng(3)
    vf = rng.standard_normal(cs.n_free)
    direct = estimator.estimate(dh, cs, 7.0, vf)
    pair = es.EigenPair(7.0, cs.expand(vf), 0.0)
    via_pair = estimator.estimate(dh, cs, pair)
    assert np.array_equal(direct.eta_t_sq, via_pair.eta_t_sq)


def test_rejects_nonconforming_and_misshaped_input():
    dh, cs = setup(uniform=1, marked=[0])  # has hanging vertices
    bad = np.zeros(dh.n_dofs)
    bad[cs.hanging_dofs[0]] = 1.0  # hanging value inconsistent with masters
    with pytest.raises(ValueError):
        estimator.estimate(dh, cs, 1.0, bad)
    with pytest.raises(ValueError):
        estimator.estimate(dh, cs, 1.0, np.zeros(dh.n_dofs + 3))


def test_total_decreases_under_uniform_refinement():
    totals = []
    for uniform in (2, 3, 4):
        dh, cs = setup(uniform=uniform)
        a = fem.assemble_stiffness(dh, cs)
        mm = fem.assemble_mass(dh, cs)
        lam, w = scipy.linalg.eigh(a.toarray(), mm.toarray())
        totals.append(estimator.estimate(dh, cs, lam[0], w[:, 0]).total)
    assert totals[1] < 0.7 * totals[0]
    assert totals[2] < 0.7 * totals[1]


# ---------------------------------------------------------------------------
# cluster report
# ---------------------------------------------------------------------------
def eig_block(uniform=3, r=3):
    dh, cs = setup(uniform=uniform)
    a = fem.assemble_stiffness(dh, cs)
    mm = fem.assemble_mass(dh, cs)
    lam, w = scipy.linalg.eigh(a.toarray(), mm.toarray())
    blk = es.EigenBlock(w[:, :r], lam[:r], np.zeros(r))
    return dh, cs, blk, lam


def test_cluster_report_formulas_and_constants():
    dh, cs, blk, lam = eig_block()
    r = blk.r
    rep = estimator.cluster_report(dh, cs, blk, lam[r], c1=2.0, c_int=3.0,
                                   algebraic_errors=np.array([ .25, .5, .75]))
    assert rep.gap_valid
    # residual measure: interior edge jump sum over the reciprocal Ritz value
    # (edge jumps do not depend on the eigenvalue argument)
    for i in range(r):
        jsum = estimator.estimate(dh, cs, 1.0,
                                  blk.vectors[:, i]).edge_j_sq.sum()
        assert rep.residual_measures[i] == pytest.approx(jsum / lam[i], rel=1e-12)
    s = 4.0 * rep.residual_measures.sum() + 9.0 * 1.5
    c_clust = (lam[r] + lam[r - 1]) / (lam[r] - lam[r - 1])
    assert rep.c_clust == pytest.approx(c_clust, rel=1e-13)
    assert rep.bound_product == pytest.approx(c_clust * s, rel=1e-12)
    assert rep.bound_sqrt == pytest.approx(np.sqrt(s), rel=1e-12)
    assert rep.bound == pytest.approx(min(c_clust * s, np.sqrt(s)), rel=1e-12)


def test_cluster_report_defaults_zero_algebraic_error():
    dh, cs, blk, lam = eig_block(r=2)
    rep = estimator.cluster_report(dh, cs, blk, lam[2])
    s = rep.residual_measures.sum()
    assert rep.c1 == 1.0 and rep.c_int == 1.0
    assert np.all(rep.algebraic_errors == 0.0)
    assert rep.bound == pytest.approx(min(rep.c_clust * s, np.sqrt(s)), rel=1e-12)


def test_cluster_report_gap_violation_yields_no_bound():
    dh, cs, blk, lam = eig_block(r=2)
    for lam_next in (blk.values[-1], 0.5 * blk.values[-1]):
        rep = estimator.cluster_report(dh, cs, blk, lam_next)
        assert not rep.gap_valid
        assert rep.c_clust is None
        assert rep.bound_product is None
        assert rep.bound_sqrt is None
        assert rep.bound is None


def test_cluster_report_validates_algebraic_error_shape():
    dh, cs, blk, lam = eig_block(r=2)
    with pytest.raises(ValueError):
        estimator.cluster_report(dh, cs, blk, lam[2],
                                 algebraic_errors=np.ones(5))


# ---------------------------------------------------------------------------
# algebraic error proxy
# ---------------------------------------------------------------------------
def test_algebraic_proxy_zero_for_exact_eigenvector():
    dh, cs, blk, lam = eig_block(r=1)
    a = fem.assemble_stiffness(dh, cs)
    mm = fem.assemble_mass(dh, cs)
    err = estimator.algebraic_error_proxy(a, mm, blk.values[0], blk.vectors[:, 0])
    assert err < 1e-20


def test_algebraic_proxy_direct_matches_iterative():
    dh, cs = setup(uniform=3)
    a = fem.assemble_stiffness(dh, cs)
    mm = fem.assemble_mass(dh, cs)
    rng = np.random.default_rng(9)
    v = rng.standard_normal(a.shape[0])
    direct = estimator.algebraic_error_proxy(a, mm, 19.7, v)
    viasolve = estimator.algebraic_error_proxy(
        a, mm, 19.7, v,
        inner_solver=linalg.make_preconditioner("exact", a=a), tol=1e-13)
    assert viasolve == pytest.approx(direct, rel=1e-8)


def test_algebraic_proxy_budget_exhaustion_raises():
    dh, cs = setup(uniform=2)
    a = fem.assemble_stiffness(dh, cs)
    mm = fem.assemble_mass(dh, cs)
    v = np.ones(a.shape[0])
    with pytest.raises(RuntimeError):
        estimator.algebraic_error_proxy(
            a, mm, 19.7, v,
            inner_solver=linalg.make_preconditioner("jacobi(1)", a=a),
            tol=1e-14, max_steps=2)
