"""Smoothers, geometric multigrid, preconditioner objects, and a dense
symmetric-definite generalized eigensolver.

All smoothing and multigrid operations act on vectors or on column blocks
(2D arrays) over the free dofs of one level.  Every preconditioner built
here is a fixed linear operator: with the same construction parameters it
maps equal inputs to bitwise-equal outputs in serial mode, which the
reproducibility tests rely on.

The dense generalized eigensolver uses an in-house Cholesky factorization
and cyclic Jacobi rotations; library eigensolvers are deliberately not
called here so that tests can use them as an independent cross-check.
"""

from __future__ import annotations

import re
from abc import ABC, abstractmethod

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "RankDeficientError",
    "spmv",
    "rayleigh_quotient",
    "jacobi_smooth",
    "chebyshev_smooth",
    "estimate_spectral_bounds",
    "GmgHierarchy",
    "gmg_vcycle",
    "Preconditioner",
    "ExactPreconditioner",
    "JacobiPreconditioner",
    "ChebyshevPreconditioner",
    "GmgPreconditioner",
    "make_preconditioner",
    "precond_residual",
    "dense_generalized_eig",
]

# fixed internal seed so that the spectral-bound estimate (and with it the
# Chebyshev preconditioner) is a deterministic function of the matrix
_POWER_ITERATION_SEED = 1729


class RankDeficientError(ValueError):
    """A matrix expected to be SPD has a (near-)zero Cholesky pivot."""


def _diag_of(a) -> np.ndarray:
    d = np.asarray(a.diagonal()).ravel()
    return d


def _div_diag(r: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Divide a vector or column block row-wise by a diagonal."""
    return (r.T / d).T


def spmv(a, x: np.ndarray) -> np.ndarray:
    """Sparse matrix times vector (or column block)."""
    if a.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {x.shape}")
    return a @ x


def rayleigh_quotient(a, m, v: np.ndarray) -> float:
    """<Av,v> / <Mv,v> for a nonzero vector v."""
    if not np.any(v):
        raise ValueError("Rayleigh quotient of the zero vector")
    return float((v @ (a @ v)) / (v @ (m @ v)))


def jacobi_smooth(a, rhs: np.ndarray, x0: np.ndarray, steps: int = 1,
                  damping: float = 2.0 / 3.0) -> np.ndarray:
    """Damped Jacobi iteration x <- x + damping * D^-1 (rhs - A x)."""
    d = _diag_of(a)
    if np.any(d == 0.0):
        raise ValueError("zero diagonal entry; Jacobi smoothing undefined")
    x = np.array(x0, dtype=float, copy=True)
    for _ in range(steps):
        x = x + damping * _div_diag(rhs - a @ x, d)
    return x


def chebyshev_smooth(a, rhs: np.ndarray, x0: np.ndarray, steps: int = 1,
                     degree: int = 1, eig_bounds=None) -> np.ndarray:
    """Chebyshev polynomial smoothing sweeps on the diagonally scaled system.

    Each sweep applies the degree-``degree`` Chebyshev iteration targeting
    the window ``eig_bounds = (lo, hi)`` of the spectrum of D^-1 A;
    eigencomponents inside the window are damped by the inverted Chebyshev
    polynomial while the smooth (low) end of the spectrum is left nearly
    untouched.  With ``degree=1`` a sweep is exactly one damped Jacobi step
    with damping 2/(lo+hi).
    """
    if eig_bounds is None:
        eig_bounds = estimate_spectral_bounds(a)
    lo, hi = float(eig_bounds[0]), float(eig_bounds[1])
    if not (0.0 < lo < hi):
        raise ValueError(f"invalid spectral bounds ({lo}, {hi}): need 0 < lo < hi")
    if degree < 1:
        raise ValueError("Chebyshev degree must be >= 1")
    d = _diag_of(a)
    if np.any(d == 0.0):
        raise ValueError("zero diagonal entry; Chebyshev smoothing undefined")
    theta = 0.5 * (lo + hi)
    delta = 0.5 * (hi - lo)
    sigma = theta / delta
    x = np.array(x0, dtype=float, copy=True)
    for _ in range(steps):
        r = rhs - a @ x
        z = _div_diag(r, d)
        dv = (1.0 / theta) * z
        x = x + dv
        rho_old = 1.0 / sigma
        for _k in range(1, degree):
            r = r - a @ dv
            z = _div_diag(r, d)
            rho = 1.0 / (2.0 * sigma - rho_old)
            dv = (rho * rho_old) * dv + (2.0 * rho / delta) * z
            x = x + dv
            rho_old = rho
    return x


def estimate_spectral_bounds(a, iters: int = 20):
    """Smoothing window (lo, hi) for the spectrum of D^-1 A.

    hi is 1.2 times a power-iteration estimate (fixed internal seed, so the
    result is deterministic) of the largest eigenvalue of D^-1 A; lo is
    hi / 30.
    """
    d = _diag_of(a)
    if np.any(d <= 0.0):
        raise ValueError("matrix diagonal must be positive")
    rng = np.random.default_rng(_POWER_ITERATION_SEED)
    v = rng.standard_normal(a.shape[0])
    mu = 1.0
    for _ in range(iters):
        w = (a @ v) / d
        mu = float((v @ (d * w)) / (v @ (d * v)))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        v = w / nw
    lam_hi = 1.2 * mu
    return (lam_hi / 30.0, lam_hi)


class GmgHierarchy:
    """Nested level operators and transfers for the multigrid v-cycle.

    ``matrices[0]`` is the coarsest level (solved directly by a dense
    Cholesky factorization, cached after the first solve); ``transfers[i]``
    maps free-dof vectors of level ``i`` into level ``i+1``.
    """

    def __init__(self, matrices, transfers):
        if not matrices:
            raise ValueError("hierarchy needs at least one level")
        if len(transfers) != len(matrices) - 1:
            raise ValueError("inconsistent hierarchy: need one transfer per level pair")
        for i, p in enumerate(transfers):
            want = (matrices[i + 1].shape[0], matrices[i].shape[0])
            if p.shape != want:
                raise ValueError(
                    f"inconsistent hierarchy: transfer {i} has shape {p.shape}, "
                    f"expected {want}")
        self.matrices = list(matrices)
        self.transfers = list(transfers)
        self.diagonals = [_diag_of(m) for m in matrices]
        self._coarse_factor = None

    @property
    def n_levels(self) -> int:
        return len(self.matrices)

    @property
    def level_sizes(self):
        return [m.shape[0] for m in self.matrices]

    def coarse_solve(self, b: np.ndarray) -> np.ndarray:
        if self._coarse_factor is None:
            dense = self.matrices[0].toarray()
            self._coarse_factor = scipy.linalg.cho_factor(dense, lower=True)
        return scipy.linalg.cho_solve(self._coarse_factor, b)


def gmg_vcycle(hierarchy: GmgHierarchy, rhs: np.ndarray, x0=None,
               pre_smooth: int = 1, post_smooth: int = 1,
               damping: float = 1.0) -> np.ndarray:
    """One multigrid v-cycle for A x = rhs on the finest hierarchy level.

    Damped Jacobi pre-/post-smoothing, residual restriction by the transfer
    transpose, and a direct solve on the coarsest level.  A single-level
    hierarchy reduces to the exact solve.
    """
    top = hierarchy.n_levels - 1
    if rhs.shape[0] != hierarchy.matrices[top].shape[0]:
        raise ValueError("right-hand side does not match the finest level")

    def cycle(level: int, b: np.ndarray, x: np.ndarray) -> np.ndarray:
        if level == 0:
            return hierarchy.coarse_solve(b)
        a = hierarchy.matrices[level]
        d = hierarchy.diagonals[level]
        for _ in range(pre_smooth):
            x = x + damping * _div_diag(b - a @ x, d)
        r = b - a @ x
        p = hierarchy.transfers[level - 1]
        xc = cycle(level - 1, p.T @ r, np.zeros_like(r, shape=(p.shape[1],) + r.shape[1:]))
        x = x + p @ xc
        for _ in range(post_smooth):
            x = x + damping * _div_diag(b - a @ x, d)
        return x

    x = np.zeros_like(rhs, dtype=float) if x0 is None \
        else np.array(x0, dtype=float, copy=True)
    return cycle(top, np.asarray(rhs, dtype=float), x)


class Preconditioner(ABC):
    """A fixed SPD linear operator approximating A^-1."""

    kind: str = "abstract"

    @abstractmethod
    def apply(self, v: np.ndarray) -> np.ndarray:
        """Return P^-1 v for a vector or column block v."""

    def describe(self) -> str:
        return self.kind


class ExactPreconditioner(Preconditioner):
    """P^-1 = A^-1 via a cached sparse LU factorization."""

    kind = "exact"

    def __init__(self, a):
        self._lu = spla.splu(sp.csc_matrix(a))

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(v, dtype=float))


class JacobiPreconditioner(Preconditioner):
    """Damped Jacobi sweeps on A x = v from a zero start."""

    kind = "jacobi"

    def __init__(self, a, steps: int = 1, damping: float = 2.0 / 3.0):
        if steps < 1:
            raise ValueError("jacobi preconditioner needs steps >= 1")
        self._a, self._steps, self._damping = a, steps, damping

    def apply(self, v: np.ndarray) -> np.ndarray:
        return jacobi_smooth(self._a, v, np.zeros_like(v, dtype=float),
                             self._steps, self._damping)

    def describe(self) -> str:
        return f"jacobi({self._steps})"


class ChebyshevPreconditioner(Preconditioner):
    """Chebyshev smoothing sweeps on A x = v from a zero start.

    The spectral window is estimated once at construction, so repeated
    applications are a fixed linear operator.
    """

    kind = "chebyshev"

    def __init__(self, a, steps: int = 1, degree: int = 3, eig_bounds=None):
        if steps < 1:
            raise ValueError("chebyshev preconditioner needs steps >= 1")
        self._a, self._steps, self._degree = a, steps, degree
        self._bounds = estimate_spectral_bounds(a) if eig_bounds is None \
            else (float(eig_bounds[0]), float(eig_bounds[1]))

    def apply(self, v: np.ndarray) -> np.ndarray:
        return chebyshev_smooth(self._a, v, np.zeros_like(v, dtype=float),
                                self._steps, self._degree, self._bounds)

    def describe(self) -> str:
        return f"chebyshev({self._steps},{self._degree})"


class GmgPreconditioner(Preconditioner):
    """A fixed number of multigrid v-cycles on A x = v from a zero start."""

    kind = "gmg"

    def __init__(self, hierarchy: GmgHierarchy, cycles: int = 1,
                 smooth_steps: int = 1, damping: float = 1.0):
        if cycles < 1:
            raise ValueError("gmg preconditioner needs cycles >= 1")
        self._h = hierarchy
        self._cycles = cycles
        self._steps = smooth_steps
        self._damping = damping

    def apply(self, v: np.ndarray) -> np.ndarray:
        x = np.zeros_like(v, dtype=float)
        for _ in range(self._cycles):
            x = gmg_vcycle(self._h, v, x, self._steps, self._steps, self._damping)
        return x

    def describe(self) -> str:
        return f"gmg({self._cycles},{self._steps})"


_SPEC_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\(\s*([0-9,\s]*)\))?\s*$")


def make_preconditioner(spec: str, a=None, hierarchy=None) -> Preconditioner:
    """Build a preconditioner from a compact text form.

    Accepted forms: ``exact``, ``jacobi(steps)``, ``chebyshev(steps,degree)``,
    ``gmg(cycles)`` or ``gmg(cycles,smooth_steps)``; argument lists may be
    omitted for defaults.  ``a`` is required except for ``gmg``, which needs
    ``hierarchy`` instead.
    """
    m = _SPEC_RE.match(spec)
    if not m:
        raise ValueError(f"cannot parse preconditioner spec {spec!r}")
    name = m.group(1)
    args = [int(t) for t in m.group(2).split(",") if t.strip()] if m.group(2) else []
    if name == "exact":
        if args:
            raise ValueError("exact takes no arguments")
        if a is None:
            raise ValueError("exact preconditioner needs the matrix")
        return ExactPreconditioner(a)
    if name == "jacobi":
        if len(args) > 1:
            raise ValueError("jacobi takes at most one argument: steps")
        if a is None:
            raise ValueError("jacobi preconditioner needs the matrix")
        return JacobiPreconditioner(a, *(args or [1]))
    if name == "chebyshev":
        if len(args) > 2:
            raise ValueError("chebyshev takes (steps, degree)")
        if a is None:
            raise ValueError("chebyshev preconditioner needs the matrix")
        return ChebyshevPreconditioner(a, *args)
    if name == "gmg":
        if len(args) > 2:
            raise ValueError("gmg takes (cycles, smooth_steps)")
        if hierarchy is None:
            raise ValueError("gmg preconditioner needs a level hierarchy")
        return GmgPreconditioner(hierarchy, *args)
    raise ValueError(f"unknown preconditioner kind {name!r}")


def precond_residual(a, p: Preconditioner, v: np.ndarray) -> float:
    """Relative inversion defect ||A P^-1 (A v) - A v|| / ||A v||.

    Zero for the exact inverse; scale-invariant in v.  This is the
    practical quality monitor for a preconditioner on the vectors the
    eigensolver actually visits.
    """
    if not np.any(v):
        raise ValueError("monitor of the zero vector")
    av = a @ v
    defect = a @ p.apply(av) - av
    return float(np.linalg.norm(defect) / np.linalg.norm(av))


# ---------------------------------------------------------------------------
# dense symmetric-definite generalized eigensolver
# ---------------------------------------------------------------------------
def _cholesky_lower(m: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with a relative pivot guard."""
    n = m.shape[0]
    tol = 1e-13 * max(float(np.trace(m)), np.finfo(float).tiny)
    low = np.zeros((n, n))
    for j in range(n):
        s = m[j, j] - low[j, :j] @ low[j, :j]
        if not s > tol:
            raise RankDeficientError(
                f"Cholesky pivot {s:.3e} at index {j} below threshold {tol:.3e}")
        low[j, j] = np.sqrt(s)
        if j + 1 < n:
            low[j + 1:, j] = (m[j + 1:, j] - low[j + 1:, :j] @ low[j, :j]) / low[j, j]
    return low


def _jacobi_eig(b: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100):
    """Cyclic Jacobi rotations; returns (eigenvalues, orthogonal Q) unsorted."""
    b = b.copy()
    n = b.shape[0]
    q = np.eye(n)
    norm = np.linalg.norm(b)
    if norm == 0.0 or n == 1:
        return np.diag(b).copy(), q
    for _sweep in range(max_sweeps):
        # off-diagonal Frobenius norm, summed directly (never via the
        # cancellation-prone ||B||_F^2 - sum(diag^2) difference)
        offdiag = b - np.diag(np.diag(b))
        off = float(np.linalg.norm(offdiag))
        if off <= tol * norm:
            return np.diag(b).copy(), q
        for p in range(n - 1):
            for r in range(p + 1, n):
                apq = b[p, r]
                if apq == 0.0:
                    continue
                tau = (b[r, r] - b[p, p]) / (2.0 * apq)
                if tau == 0.0:
                    t = 1.0
                elif abs(tau) > 1e150:  # asymptotic tangent; avoids tau**2 overflow
                    t = 0.5 / tau
                else:
                    t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rp, rq = b[p, :].copy(), b[r, :].copy()
                b[p, :] = c * rp - s * rq
                b[r, :] = s * rp + c * rq
                cp, cq = b[:, p].copy(), b[:, r].copy()
                b[:, p] = c * cp - s * cq
                b[:, r] = s * cp + c * cq
                b[p, r] = 0.0
                b[r, p] = 0.0
                qp, qq = q[:, p].copy(), q[:, r].copy()
                q[:, p] = c * qp - s * qq
                q[:, r] = s * qp + c * qq
    raise ArithmeticError("Jacobi eigensolver failed to converge")


def dense_generalized_eig(ar: np.ndarray, mr: np.ndarray):
    """Eigenpairs of the dense pencil (Ar, Mr) with Mr SPD.

    Factor Mr = L L^T, diagonalize L^-1 Ar L^-T by cyclic Jacobi rotations
    (off-diagonal norm driven below 1e-14 relative), and lift the vectors.
    Returns (values ascending, W) with W^T Mr W = I.

    Raises RankDeficientError when Mr is numerically rank deficient.
    """
    ar = np.asarray(ar, dtype=float)
    mr = np.asarray(mr, dtype=float)
    if ar.ndim != 2 or ar.shape[0] != ar.shape[1] or ar.shape != mr.shape:
        raise ValueError("need square matrices of equal shape")
    ar = 0.5 * (ar + ar.T)
    mr = 0.5 * (mr + mr.T)
    low = _cholesky_lower(mr)
    b = scipy.linalg.solve_triangular(low, ar, lower=True)
    b = scipy.linalg.solve_triangular(low, b.T, lower=True).T
    b = 0.5 * (b + b.T)
    lam, q = _jacobi_eig(b)
    order = np.argsort(lam, kind="stable")
    w = scipy.linalg.solve_triangular(low, q[:, order], lower=True, trans="T")
    return lam[order], w
