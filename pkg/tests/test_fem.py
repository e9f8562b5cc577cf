"""Tests for Q1 assembly, constraints, transfers, and the multigrid setup."""

import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp

from sapinvit import fem, mesh as msh


def grid(domain, uniform=0):
    return msh.uniform_refine(msh.make_grid(domain), uniform)


# ---------------------------------------------------------------------------
# local matrices
# ---------------------------------------------------------------------------
def test_local_stiffness_unit_square_entries():
    k = fem.local_stiffness(1.0, 1.0)
    want = np.array([
        [4, -1, -2, -1],
        [-1, 4, -1, -2],
        [-2, -1, 4, -1],
        [-1, -2, -1, 4],
    ]) / 6.0
    assert np.allclose(k, want, atol=1e-14)


def test_local_stiffness_scale_invariant_and_zero_rowsum():
    for s in (0.5, 0.125, 3.0):
        k = fem.local_stiffness(s, s)
        assert np.allclose(k, fem.local_stiffness(1.0, 1.0), atol=1e-14)
        # constants lie in the kernel of the element Laplacian
        assert np.allclose(k @ np.ones(4), 0.0, atol=1e-14)
    ka = fem.local_stiffness(2.0, 0.5)
    assert np.allclose(ka, ka.T, atol=1e-15)
    assert np.allclose(ka @ np.ones(4), 0.0, atol=1e-14)


def test_local_mass_entries_and_h2_scaling():
    w0 = np.array([
        [4, 2, 1, 2],
        [2, 4, 2, 1],
        [1, 2, 4, 2],
        [2, 1, 2, 4],
    ]) / 36.0
    assert np.allclose(fem.local_mass(1.0, 1.0), w0, atol=1e-14)
    for w, h in ((0.5, 0.5), (0.25, 0.125)):
        m = fem.local_mass(w, h)
        assert np.allclose(m, w * h * w0, atol=1e-14)
        # integrating 1*1 over the cell gives its area
        assert np.ones(4) @ m @ np.ones(4) == pytest.approx(w * h)


# ---------------------------------------------------------------------------
# dof distribution and constraints
# ---------------------------------------------------------------------------
def test_dof_counts_uniform_2x2():
    dh = fem.distribute_dofs(grid("unit_square", 1))
    assert dh.n_dofs == 9
    assert dh.n_cells == 4
    cs = fem.build_constraints(dh)
    assert cs.n_dirichlet == 8
    assert cs.n_hanging == 0
    assert cs.n_free == 1
    # the single free dof is the mesh center
    x, y = dh.dof_points()
    j = cs.dof_of_free[0]
    assert (x[j], y[j]) == (0.5, 0.5)


def test_dof_counts_seven_cell_mesh():
    m = grid("unit_square", 1)
    m = msh.refine(m, [m.active_cells()[0]])
    dh = fem.distribute_dofs(m)
    assert dh.n_cells == 7
    assert dh.n_dofs == 14
    cs = fem.build_constraints(dh)
    assert cs.n_hanging == 2
    assert cs.n_free == dh.n_dofs - cs.n_dirichlet - 2


def test_dof_numbering_lexicographic():
    dh = fem.distribute_dofs(grid("unit_square", 1))
    x, y = dh.dof_points()
    keys = list(zip(x, y))
    assert keys == sorted(keys)


def test_hanging_constraint_weights_are_half_half():
    m = grid("unit_square", 1)
    m = msh.refine(m, [m.active_cells()[0]])
    dh = fem.distribute_dofs(m)
    cs = fem.build_constraints(dh)
    c = cs.matrix.toarray()
    for hd in cs.hanging_dofs:
        row = c[hd]
        nz = row[row != 0.0]
        # each hanging dof averages its two edge endpoint masters
        assert sorted(nz.tolist()) in ([0.5, 0.5], [0.5])
    # free rows carry a single unit weight
    for fd in cs.dof_of_free:
        assert np.count_nonzero(c[fd]) == 1 and c[fd].sum() == 1.0


def test_expand_reduce_roundtrip_and_conformity():
    m = grid("lshape", 1)
    m = msh.refine(m, m.active_cells()[:3])
    dh = fem.distribute_dofs(m)
    cs = fem.build_constraints(dh)
    rng = np.random.default_rng(0)
    x = rng.standard_normal(cs.n_free)
    v = cs.expand(x)
    assert np.array_equal(cs.reduce(v), x)
    assert cs.constraint_residual(v) == 0.0
    assert np.all(v[cs.dirichlet] == 0.0)


# ---------------------------------------------------------------------------
# assembled operators
# ---------------------------------------------------------------------------
def dense_operator(domain, uniform, extra=0):
    m = grid(domain, uniform)
    for _ in range(extra):
        m = msh.refine(m, m.active_cells()[:2])
    dh = fem.distribute_dofs(m)
    cs = fem.build_constraints(dh)
    return dh, cs, fem.assemble_stiffness(dh, cs), fem.assemble_mass(dh, cs)


def test_assembled_operators_are_spd():
    for domain, uni, extra in (("unit_square", 2, 0), ("lshape", 1, 1),
                               ("dumbbell", 1, 0)):
        _, _, a, m = dense_operator(domain, uni, extra)
        for mat in (a, m):
            d = mat.toarray()
            assert np.allclose(d, d.T, atol=1e-14)
            assert np.min(scipy.linalg.eigvalsh(d)) > 0.0


def test_single_free_dof_quotient_is_24():
    # 2x2 unit square: A_11/M_11 of the lone interior dof is (8/3)/(1/9) = 24
    _, _, a, m = dense_operator("unit_square", 1)
    assert a.shape == (1, 1)
    assert a[0, 0] == pytest.approx(8.0 / 3.0)
    assert m[0, 0] == pytest.approx(1.0 / 9.0)


def test_mass_matrix_entries_sum_to_interior_mass():
    # sum_ij M_ij = integral of (sum of free basis functions)^2 is bounded
    # by the domain area and positive
    _, _, _, m = dense_operator("unit_square", 3)
    s = float(m.sum())
    assert 0.0 < s < 1.0


def test_lowest_generalized_eigenvalue_above_continuum():
    # discrete Rayleigh quotients bound the continuum eigenvalue from above
    for n in (2, 3):
        _, _, a, m = dense_operator("unit_square", n)
        lam = scipy.linalg.eigh(a.toarray(), m.toarray(),
                                subset_by_index=[0, 0])[0][0]
        assert lam >= 2.0 * np.pi ** 2
        assert lam == pytest.approx(2.0 * np.pi ** 2, rel=0.2)


def test_assembly_on_nonuniform_mesh_matches_dense_reference():
    # condensed operator == C^T A_full C built independently entry by entry
    m = grid("unit_square", 1)
    m = msh.refine(m, [m.active_cells()[0]])
    dh = fem.distribute_dofs(m)
    cs = fem.build_constraints(dh)
    a = fem.assemble_stiffness(dh, cs).toarray()
    full = np.zeros((dh.n_dofs, dh.n_dofs))
    x0, y0, w, h = m.cell_boxes(dh.cell_ids)
    for row in range(dh.n_cells):
        k = fem.local_stiffness(float(w[row]), float(h[row]))
        dofs = dh.cell_dofs[row]
        full[np.ix_(dofs, dofs)] += k
    c = cs.matrix.toarray()
    assert np.allclose(a, c.T @ full @ c, atol=1e-13)


# ---------------------------------------------------------------------------
# transfers
# ---------------------------------------------------------------------------
def test_prolongation_weights_and_rowsums():
    coarse = grid("unit_square", 1)
    fine = msh.refine(coarse, coarse.active_cells())
    dhc = fem.distribute_dofs(coarse)
    dhf = fem.distribute_dofs(fine)
    p = fem.prolongation(dhc, dhf)
    assert p.shape == (dhf.n_dofs, dhc.n_dofs)
    # rows sum to one: constants are reproduced exactly
    assert np.allclose(np.asarray(p.sum(axis=1)).ravel(), 1.0)
    vals = sorted(set(np.round(p.data, 12)))
    assert vals == [0.25, 0.5, 1.0]
    # interpolation is exact on bilinear coordinates
    xc, yc = dhc.dof_points()
    xf, yf = dhf.dof_points()
    for coarse_field in (xc, yc, xc * yc):
        fine_field = p @ coarse_field
        if coarse_field is xc:
            assert np.allclose(fine_field, xf)
        elif coarse_field is yc:
            assert np.allclose(fine_field, yf)
        else:
            assert np.allclose(fine_field, xf * yf)


def test_prolongation_rejects_level_skips():
    # transfers must link consecutive tessellation levels: jumping 0 -> 2
    # leaves midpoints whose parents are not coarse members
    m = grid("unit_square", 2)
    with pytest.raises(ValueError):
        fem.prolongation(fem.distribute_dofs(m, 0), fem.distribute_dofs(m, 2))


def mesh_pairs_for_nesting():
    rng = np.random.default_rng(19)
    pairs = []
    for domain in ("unit_square", "lshape"):
        c = grid(domain, 1)
        pairs.append((c, msh.refine(c, c.active_cells())))
        c2 = msh.refine(c, c.active_cells()[:2])
        pairs.append((c2, msh.refine(c2, rng.choice(c2.active_cells(), 3,
                                                    replace=False))))
    d = grid("dumbbell", 1)
    pairs.append((d, msh.refine(d, d.active_cells()[::2])))
    return pairs


def test_galerkin_nesting_of_stiffness():
    # P^T A_fine P equals A_coarse to roundoff on nested mesh pairs
    for coarse, fine in mesh_pairs_for_nesting():
        dhc = fem.distribute_dofs(coarse)
        csc = fem.build_constraints(dhc)
        dhf = fem.distribute_dofs(fine)
        csf = fem.build_constraints(dhf)
        ac = fem.assemble_stiffness(dhc, csc)
        af = fem.assemble_stiffness(dhf, csf)
        p = fem.reduced_transfer(csc, csf, fem.prolongation(dhc, dhf))
        gap = (p.T @ af @ p - ac).toarray()
        scale = np.abs(ac.toarray()).max()
        assert np.abs(gap).max() <= 1e-12 * scale


def test_reduced_transfer_maps_conforming_functions():
    coarse = grid("unit_square", 1)
    fine = msh.refine(coarse, [coarse.active_cells()[0]])
    dhc = fem.distribute_dofs(coarse)
    csc = fem.build_constraints(dhc)
    dhf = fem.distribute_dofs(fine)
    csf = fem.build_constraints(dhf)
    p = fem.reduced_transfer(csc, csf, fem.prolongation(dhc, dhf))
    x = np.ones(csc.n_free)
    vf = csf.expand(p @ x)
    # the transferred field satisfies the fine hanging constraints exactly
    assert csf.constraint_residual(vf) <= 1e-14
    # and reproduces the coarse field at every shared vertex
    vc = csc.expand(x)
    shared = min(dhc.n_dofs, dhf.n_dofs)
    fverts = dhf.dof_to_vertex
    cvd = dhc.vertex_to_dof
    for fd in range(dhf.n_dofs):
        v = fverts[fd]
        if v < cvd.size and cvd[v] >= 0:
            assert vf[fd] == pytest.approx(vc[cvd[v]], abs=1e-14)


# ---------------------------------------------------------------------------
# point evaluation
# ---------------------------------------------------------------------------
def test_fe_value_and_gradient_on_bilinear_field():
    m = grid("unit_square", 2)
    dh = fem.distribute_dofs(m)
    x, y = dh.dof_points()
    vec = 2.0 * x + 3.0 * y + 4.0 * x * y + 1.0
    cell = int(dh.cell_ids[5])
    for xi, eta in ((0.0, 0.0), (1.0, 1.0), (0.3, 0.8)):
        val, (gx, gy) = fem.fe_value_and_gradient(dh, vec, cell, xi, eta)
        x0, y0, w, h = m.cell_boxes(np.array([cell]))
        px = float(x0[0] + xi * w[0])
        py = float(y0[0] + eta * h[0])
        assert val == pytest.approx(2 * px + 3 * py + 4 * px * py + 1, abs=1e-13)
        assert gx == pytest.approx(2 + 4 * py, abs=1e-12)
        assert gy == pytest.approx(3 + 4 * px, abs=1e-12)


def test_fe_value_and_gradient_input_validation():
    m = grid("unit_square", 1)
    dh = fem.distribute_dofs(m)
    vec = np.zeros(dh.n_dofs)
    with pytest.raises(ValueError):
        fem.fe_value_and_gradient(dh, vec, int(dh.cell_ids[0]), 1.5, 0.0)
    with pytest.raises(ValueError):
        fem.fe_value_and_gradient(dh, np.zeros(3), int(dh.cell_ids[0]), 0.5, 0.5)
    with pytest.raises(ValueError):
        fem.fe_value_and_gradient(dh, vec, 10 ** 6, 0.5, 0.5)


# ---------------------------------------------------------------------------
# multigrid hierarchy
# ---------------------------------------------------------------------------
def test_hierarchy_levels_and_sizes():
    m = grid("unit_square", 3)
    h = fem.build_gmg_hierarchy(m, coarse_threshold=10)
    sizes = h.level_sizes
    # 8x8 leaves: 49 free dofs on top, 9 below, 1 below that; the threshold
    # merges the single-dof level into the direct solve
    assert sizes[-1] == 49
    assert sizes == sorted(sizes)
    assert sizes[0] <= 10
    for p, (nc, nf) in zip(h.transfers, zip(sizes[:-1], sizes[1:])):
        assert p.shape == (nf, nc)


def test_hierarchy_respects_coarse_threshold():
    m = grid("unit_square", 4)
    small = fem.build_gmg_hierarchy(m, coarse_threshold=9)
    big = fem.build_gmg_hierarchy(m, coarse_threshold=100)
    assert small.n_levels > big.n_levels
    assert small.level_sizes[-1] == big.level_sizes[-1]
    assert big.level_sizes[0] <= 100


def test_hierarchy_coarse_matrices_match_direct_assembly():
    rng = np.random.default_rng(5)
    m = grid("lshape", 2)
    m = msh.refine(m, rng.choice(m.active_cells(), 8, replace=False))
    h = fem.build_gmg_hierarchy(m, coarse_threshold=4)
    top = m.level_count - 1
    offset = top - (h.n_levels - 1)
    for i, mat in enumerate(h.matrices):
        dh = fem.distribute_dofs(m, offset + i)
        cs = fem.build_constraints(dh)
        direct = fem.assemble_stiffness(dh, cs).toarray()
        got = mat.toarray()
        assert got.shape == direct.shape
        assert np.abs(got - direct).max() <= 1e-11 * np.abs(direct).max()


def test_hierarchy_galerkin_two_level_consistency():
    m = grid("unit_square", 3)
    h = fem.build_gmg_hierarchy(m, coarse_threshold=4)
    for i, p in enumerate(h.transfers):
        coarse = h.matrices[i].toarray()
        fine = h.matrices[i + 1]
        assert np.abs((p.T @ fine @ p) - coarse).max() <= 1e-12 * np.abs(coarse).max()


def test_hierarchy_accepts_preassembled_finest():
    m = grid("unit_square", 3)
    dh = fem.distribute_dofs(m)
    cs = fem.build_constraints(dh)
    a = fem.assemble_stiffness(dh, cs)
    h = fem.build_gmg_hierarchy(m, coarse_threshold=10, finest=(dh, cs, a))
    assert h.matrices[-1] is a


def test_dump_matrix_roundtrip(tmp_path):
    import scipy.io

    _, _, a, _ = dense_operator("unit_square", 2)
    path = tmp_path / "stiffness.mtx"
    fem.dump_matrix(path, a)
    b = scipy.io.mmread(path)
    assert np.allclose(sp.csr_matrix(b).toarray(), a.toarray(), atol=1e-12)


def test_extend_hierarchy_append_path():
    m = grid("unit_square", 3)
    dh = fem.distribute_dofs(m)
    cs = fem.build_constraints(dh)
    a = fem.assemble_stiffness(dh, cs)
    h = fem.build_gmg_hierarchy(m, coarse_threshold=20, finest=(dh, cs, a))
    m2 = msh.uniform_refine(m)
    dh2 = fem.distribute_dofs(m2)
    cs2 = fem.build_constraints(dh2)
    a2 = fem.assemble_stiffness(dh2, cs2)
    t = fem.reduced_transfer(cs, cs2, fem.prolongation(dh, dh2))
    h2 = fem.extend_gmg_hierarchy(h, a2, t)
    # 225 free dofs is more than growth x the level below the top: append
    assert h2.level_sizes == h.level_sizes + [a2.shape[0]]
    assert h2.matrices[-1] is a2
    assert h2.transfers[-1] is t
    # the original hierarchy object is untouched
    assert h.matrices[-1] is a


def test_extend_hierarchy_replace_top_composes_transfers():
    m = grid("unit_square", 3)
    dh = fem.distribute_dofs(m)
    cs = fem.build_constraints(dh)
    a = fem.assemble_stiffness(dh, cs)
    h = fem.build_gmg_hierarchy(m, coarse_threshold=20, finest=(dh, cs, a))
    assert h.level_sizes == [9, 49]
    prev = (dh, cs)
    # first small increment stacks a new top close in size to the old one...
    m = msh.refine(m, m.active_cells()[:2])
    dh2 = fem.distribute_dofs(m)
    cs2 = fem.build_constraints(dh2)
    a2 = fem.assemble_stiffness(dh2, cs2)
    t2 = fem.reduced_transfer(prev[1], cs2, fem.prolongation(prev[0], dh2))
    h2 = fem.extend_gmg_hierarchy(h, a2, t2)
    assert len(h2.level_sizes) == 3
    # ...and the next small increment replaces that top instead of stacking
    m = msh.refine(m, m.active_cells()[:2])
    dh3 = fem.distribute_dofs(m)
    cs3 = fem.build_constraints(dh3)
    a3 = fem.assemble_stiffness(dh3, cs3)
    t3 = fem.reduced_transfer(cs2, cs3, fem.prolongation(dh2, dh3))
    h3 = fem.extend_gmg_hierarchy(h2, a3, t3)
    assert len(h3.level_sizes) == 3
    assert h3.matrices[-1] is a3
    composed = (t3 @ h2.transfers[-1]).toarray()
    assert np.allclose(h3.transfers[-1].toarray(), composed, atol=1e-14)
    # nesting survives the composition: the Galerkin identity still holds
    mid = h3.matrices[1].toarray()
    p = h3.transfers[1]
    assert np.abs((p.T @ a3 @ p) - mid).max() <= 1e-12 * np.abs(mid).max()


def test_extend_hierarchy_matches_fresh_build_solve():
    # v-cycles on an incrementally extended hierarchy solve the same system
    # as on a freshly built one
    m = grid("unit_square", 3)
    dh = fem.distribute_dofs(m)
    cs = fem.build_constraints(dh)
    a = fem.assemble_stiffness(dh, cs)
    h = fem.build_gmg_hierarchy(m, coarse_threshold=20, finest=(dh, cs, a))
    rng = np.random.default_rng(33)
    m2 = msh.refine(m, rng.choice(m.active_cells(), 12, replace=False))
    dh2 = fem.distribute_dofs(m2)
    cs2 = fem.build_constraints(dh2)
    a2 = fem.assemble_stiffness(dh2, cs2)
    t = fem.reduced_transfer(cs, cs2, fem.prolongation(dh, dh2))
    h2 = fem.extend_gmg_hierarchy(h, a2, t)

    x_true = rng.standard_normal(a2.shape[0])
    rhs = a2 @ x_true
    x = np.zeros_like(x_true)
    for _ in range(30):
        from sapinvit import linalg as la
        x = la.gmg_vcycle(h2, rhs, x)
    assert np.linalg.norm(x - x_true) <= 1e-9 * np.linalg.norm(x_true)


def test_extend_hierarchy_rejects_mismatched_transfer():
    m = grid("unit_square", 3)
    dh = fem.distribute_dofs(m)
    cs = fem.build_constraints(dh)
    a = fem.assemble_stiffness(dh, cs)
    h = fem.build_gmg_hierarchy(m, coarse_threshold=20, finest=(dh, cs, a))
    bad = sp.eye_array(a.shape[0]).tocsr()
    with pytest.raises(ValueError):
        fem.extend_gmg_hierarchy(h, a, bad[:, :5])
