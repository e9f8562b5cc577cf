"""Tests for the analytic, dense, and extrapolated reference spectra."""

import numpy as np
import pytest
import scipy.linalg

from sapinvit import adaptivity as ad, fem, mesh as msh, oracle


# ---------------------------------------------------------------------------
# analytic unit-square spectrum
# ---------------------------------------------------------------------------
def test_analytic_square_lowest_values():
    ref = oracle.analytic_square_spectrum(6)
    pi2 = np.pi ** 2
    want = np.array([2.0, 5.0, 5.0, 8.0, 10.0, 10.0]) * pi2
    assert np.allclose(ref.values, want, rtol=1e-15)
    assert ref.domain == "unit_square"
    assert ref.provenance == "analytic"
    assert np.all(ref.uncertainties == 0.0)


def test_analytic_square_is_complete_prefix():
    # brute-force enumeration over a generous index box must agree, which
    # guards against missed pairs near the enumeration boundary
    count = 40
    ref = oracle.analytic_square_spectrum(count)
    sums = sorted((m * m + n * n)
                  for m in range(1, 40) for n in range(1, 40))[:count]
    assert np.allclose(ref.values, np.array(sums, dtype=float) * np.pi ** 2,
                       rtol=1e-15)
    assert np.all(np.diff(ref.values) >= 0)


def test_analytic_square_validation():
    with pytest.raises(ValueError):
        oracle.analytic_square_spectrum(0)


# ---------------------------------------------------------------------------
# dense reference
# ---------------------------------------------------------------------------
def test_dense_reference_matches_scipy():
    m = msh.uniform_refine(msh.make_grid("unit_square"), 3)
    ref = oracle.dense_reference("unit_square", m, r=4)
    dh = fem.distribute_dofs(m)
    cs = fem.build_constraints(dh)
    a = fem.assemble_stiffness(dh, cs)
    mm = fem.assemble_mass(dh, cs)
    lam = scipy.linalg.eigh(a.toarray(), mm.toarray(), eigvals_only=True)
    assert np.allclose(ref.values, lam[:4], rtol=1e-11)
    assert ref.r == 4
    assert ref.provenance.startswith("dense(")
    assert np.all(ref.uncertainties > 0.0)


def test_dense_reference_discrete_above_continuum():
    m = msh.uniform_refine(msh.make_grid("unit_square"), 4)
    ref = oracle.dense_reference("unit_square", m, r=1)
    assert ref.values[0] > 2.0 * np.pi ** 2
    assert ref.values[0] == pytest.approx(2.0 * np.pi ** 2, rel=0.01)


def test_dense_reference_respects_dof_limit():
    m = msh.uniform_refine(msh.make_grid("unit_square"), 5)
    with pytest.raises(ValueError):
        oracle.dense_reference("unit_square", m, r=1, max_dofs=100)
    with pytest.raises(ValueError):
        oracle.dense_reference(
            "unit_square", msh.uniform_refine(msh.make_grid("unit_square"), 2),
            r=1000)


# ---------------------------------------------------------------------------
# extrapolated reference
# ---------------------------------------------------------------------------
def test_extrapolation_recovers_synthetic_model():
    # data generated exactly from the fitted model lam + c * N^-alpha
    lam, c, alpha = 19.7392088, 140.0, 1.0
    n = np.array([100.0, 400.0, 1600.0, 6400.0, 25600.0])
    pairs = [(int(k), np.array([lam + c * k ** (-alpha)])) for k in n]
    ref = oracle.extrapolated_reference("unit_square", pairs)
    assert ref.values[0] == pytest.approx(lam, abs=1e-8)
    assert ref.uncertainties[0] < 1e-6
    assert ref.provenance.startswith("extrapolated(")


def test_extrapolation_on_real_uniform_sequence():
    # uniform unit-square refinement: extrapolated lowest eigenvalue lands
    # on the continuum value with a few-digit margin and a small reported
    # uncertainty
    hist = ad.a_pinvit("unit_square",
                       ad.AdaptiveConfig(max_levels=5, theta=1.0,
                                         pre_refinements=2))
    ref = oracle.extrapolated_reference("unit_square", hist)
    true = 2.0 * np.pi ** 2
    assert abs(ref.values[0] - true) / true < 1e-4
    assert ref.uncertainties[0] < 1e-2


def test_extrapolation_constant_tail_returns_last_value():
    pairs = [(100, [7.5]), (200, [7.5]), (400, [7.5]), (800, [7.5])]
    ref = oracle.extrapolated_reference("x", pairs)
    assert ref.values[0] == 7.5


def test_extrapolation_rejects_bad_sequences():
    with pytest.raises(ValueError):
        oracle.extrapolated_reference("x", [(10, [3.0]), (20, [2.9])])
    increasing = [(10, [3.0]), (20, [2.9]), (40, [3.1])]
    with pytest.raises(ValueError):
        oracle.extrapolated_reference("x", increasing)
    bad_dofs = [(10, [3.0]), (10, [2.9]), (40, [2.8])]
    with pytest.raises(ValueError):
        oracle.extrapolated_reference("x", bad_dofs)
    with pytest.raises(ValueError):
        oracle.extrapolated_reference("x", [(10, [3.0]), (20, [2.9]),
                                            (40, [2.8])], r=5)


# ---------------------------------------------------------------------------
# container and CSV cache
# ---------------------------------------------------------------------------
def test_reference_spectrum_validation():
    with pytest.raises(ValueError):
        oracle.ReferenceSpectrum("x", [2.0, 1.0], [0.0, 0.0], "p")
    with pytest.raises(ValueError):
        oracle.ReferenceSpectrum("x", [1.0, 2.0], [-1.0, 0.0], "p")
    with pytest.raises(ValueError):
        oracle.ReferenceSpectrum("x", [1.0, 2.0], [0.0, 0.0, 0.0], "p")
    # scalar uncertainty broadcasts
    ref = oracle.ReferenceSpectrum("x", [1.0, 2.0], [0.5], "p")
    assert np.array_equal(ref.uncertainties, [0.5, 0.5])


def test_write_reference_csv(tmp_path):
    ref = oracle.analytic_square_spectrum(3)
    path = tmp_path / "reference.csv"
    oracle.write_reference_csv(ref, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "domain,provenance,index,value,uncertainty"
    assert len(lines) == 4
    first = lines[1].split(",")
    assert first[:3] == ["unit_square", "analytic", "1"]
    assert float(first[3]) == pytest.approx(2.0 * np.pi ** 2, rel=1e-15)
