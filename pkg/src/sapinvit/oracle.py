"""Independent ground-truth eigenvalues for tests and run summaries.

Three sources, in decreasing order of authority:

- closed-form values for the unit square (separation of variables),
- dense generalized eigensolves of small assembled problems,
- extrapolated limits fitted to a convergent sequence of discrete values
  with the model ``lambda_h = lambda + c * N**(-alpha)``.

These deliberately avoid the iterative solver paths so they can serve as
independent cross-checks of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, least_squares

from . import fem
from .linalg import dense_generalized_eig

__all__ = [
    "ReferenceSpectrum",
    "analytic_square_spectrum",
    "dense_reference",
    "extrapolated_reference",
    "write_reference_csv",
]


@dataclass
class ReferenceSpectrum:
    """Reference eigenvalues with per-value uncertainty and provenance."""

    domain: str
    values: np.ndarray
    uncertainties: np.ndarray
    provenance: str

    def __post_init__(self):
        self.values = np.atleast_1d(np.asarray(self.values, dtype=float))
        self.uncertainties = np.atleast_1d(
            np.asarray(self.uncertainties, dtype=float))
        if self.uncertainties.size == 1 and self.values.size > 1:
            self.uncertainties = np.full(self.values.size,
                                         self.uncertainties[0])
        if self.uncertainties.shape != self.values.shape:
            raise ValueError("values and uncertainties differ in length")
        if np.any(np.diff(self.values) < -1e-12 * np.abs(self.values[:-1])):
            raise ValueError("reference values must be ascending")
        if np.any(self.uncertainties < 0.0):
            raise ValueError("uncertainties must be non-negative")

    @property
    def r(self) -> int:
        return int(self.values.size)


def analytic_square_spectrum(count: int) -> ReferenceSpectrum:
    """Lowest ``count`` Dirichlet Laplace eigenvalues of the unit square.

    The spectrum is ``(m**2 + n**2) * pi**2`` over integer pairs m, n >= 1,
    listed with multiplicity.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    bound = max(2, int(np.ceil(np.sqrt(float(count)))) + 1)
    while True:
        mm, nn = np.meshgrid(np.arange(1, bound + 1), np.arange(1, bound + 1))
        sums = np.sort((mm * mm + nn * nn).ravel())
        # with m, n <= bound every omitted pair exceeds (bound+1)^2, so the
        # enumerated values up to that threshold are complete
        complete = sums[sums <= (bound + 1) ** 2]
        if complete.size >= count:
            vals = complete[:count] * np.pi ** 2
            return ReferenceSpectrum("unit_square", vals,
                                     np.zeros(count), "analytic")
        bound *= 2


def dense_reference(problem: str, mesh, r: int | None = None,
                    max_dofs: int = 2000) -> ReferenceSpectrum:
    """Lowest ``r`` discrete eigenvalues of a small mesh via dense algebra.

    Assembles the constrained stiffness/mass pair and solves the full
    generalized problem with the dense solver; refuses meshes beyond
    ``max_dofs`` to keep the cubic cost in check.  ``r=None`` returns the
    full spectrum.
    """
    dh = fem.distribute_dofs(mesh)
    if dh.n_dofs > max_dofs:
        raise ValueError(
            f"mesh has {dh.n_dofs} dofs > dense limit {max_dofs}")
    cs = fem.build_constraints(dh)
    a = fem.assemble_stiffness(dh, cs).toarray()
    m = fem.assemble_mass(dh, cs).toarray()
    lam, _ = dense_generalized_eig(a, m)
    if r is None:
        r = lam.size
    if not 1 <= r <= lam.size:
        raise ValueError(f"r must be in [1, {lam.size}]")
    eps = np.finfo(float).eps
    unc = np.maximum(np.abs(lam[:r]) * 64 * eps, 64 * eps)
    return ReferenceSpectrum(getattr(mesh, "domain", str(problem)),
                             lam[:r], unc, f"dense(n_free={cs.n_free})")


def _fit_limit(n: np.ndarray, y: np.ndarray,
               alpha_range=(0.05, 4.0)) -> float:
    """Limit of ``y = lam + c * n**(-alpha)`` through three points."""
    d01 = y[0] - y[1]
    d12 = y[1] - y[2]
    if d12 <= 0.0 or d01 <= 0.0:
        # (near-)converged tail: the last value is the limit
        return float(y[2])
    ratio = d01 / d12

    def g(alpha):
        p = n ** (-alpha)
        return (p[0] - p[1]) / (p[1] - p[2]) - ratio

    lo, hi = alpha_range
    glo, ghi = g(lo), g(hi)
    if glo == 0.0:
        alpha = lo
    elif ghi == 0.0:
        alpha = hi
    elif glo * ghi < 0.0:
        alpha = brentq(g, lo, hi, xtol=1e-12, rtol=1e-14)
    else:
        alpha = lo if abs(glo) < abs(ghi) else hi
    p = n ** (-alpha)
    c = d12 / (p[1] - p[2])
    return float(y[2] - c * p[2])


def _fit_limit_lsq(n: np.ndarray, y: np.ndarray,
                   alpha_range=(0.05, 4.0)) -> float:
    """Least-squares limit of the same model over all given points."""
    lam0 = _fit_limit(n[-3:], y[-3:], alpha_range)
    c0 = y[0] - lam0
    if c0 <= 0.0:
        return float(y[-1])

    def resid(p):
        lam, logc, alpha = p
        return lam + np.exp(logc) * n ** (-alpha) - y

    sol = least_squares(
        resid, (lam0, np.log(c0), 1.0),
        bounds=((-np.inf, -60.0, alpha_range[0]),
                (np.inf, 60.0, alpha_range[1])))
    return float(sol.x[0])


def extrapolated_reference(problem: str, levels, r: int | None = None
                           ) -> ReferenceSpectrum:
    """Extrapolated eigenvalue limits from a converged level sequence.

    ``levels`` is a run history or an iterable of ``(n_dofs, values)``
    pairs with at least three entries; values must approach the limit
    monotonically from above (non-increasing) on the fitted tail.  The
    limit of each eigenvalue is fitted through the last three levels; the
    reported uncertainty is the disagreement with an independent
    least-squares fit of the same model over the last (up to six) levels,
    which is machine-level for constant tails and covers the fit's own
    error on clean sequences.
    """
    pairs = _level_pairs(levels)
    if len(pairs) < 3:
        raise ValueError("need at least 3 levels to extrapolate")
    n = np.array([float(p[0]) for p in pairs])
    y = np.array([np.atleast_1d(np.asarray(p[1], dtype=float)) for p in pairs])
    if r is None:
        r = y.shape[1]
    if not 1 <= r <= y.shape[1]:
        raise ValueError(f"r must be in [1, {y.shape[1]}]")
    used = min(len(pairs), 6)
    tail = slice(-used, None)
    if np.any(np.diff(n[tail]) <= 0):
        raise ValueError("dof counts must be strictly increasing")
    eps = np.finfo(float).eps
    vals = np.empty(r)
    uncs = np.empty(r)
    for i in range(r):
        yi = y[:, i]
        if np.any(np.diff(yi[tail]) > 1e-12 * np.abs(yi[tail][:-1]) + 1e-300):
            raise ValueError(
                f"eigenvalue {i + 1} sequence is not non-increasing on the "
                "fit window")
        lam = _fit_limit(n[-3:], yi[-3:])
        if used > 3:
            unc = abs(lam - _fit_limit_lsq(n[tail], yi[tail]))
        else:
            unc = abs(yi[-1] - lam)
        vals[i] = lam
        uncs[i] = max(unc, 8 * eps * max(abs(lam), 1.0))
    return ReferenceSpectrum(str(problem), vals, uncs,
                             f"extrapolated(last {used} of {len(pairs)} levels)")


def _level_pairs(levels):
    records = getattr(levels, "records", levels)
    pairs = []
    for rec in records:
        if hasattr(rec, "n_dofs"):
            pairs.append((rec.n_dofs, rec.eigenvalues))
        else:
            pairs.append((rec[0], rec[1]))
    return pairs


def write_reference_csv(spec: ReferenceSpectrum, path) -> None:
    """Cache a reference spectrum as CSV (stable header and ordering)."""
    lines = ["domain,provenance,index,value,uncertainty"]
    for i, (v, u) in enumerate(zip(spec.values, spec.uncertainties), start=1):
        lines.append(f"{spec.domain},{spec.provenance},{i},{v:.17g},{u:.17g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
