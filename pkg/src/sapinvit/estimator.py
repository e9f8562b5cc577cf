"""Residual a posteriori error estimator for approximate eigenpairs.

Per-cell indicator (2D):

    eta_T^2 = |T| * ||mu v||^2_{L2(T)}  +  attributed edge terms,
    J_E^2   = |E| * ||[dv/dn]||^2_{L2(E)}   per interior edge E,

where [dv/dn] is the jump of the normal derivative across E.  On
axis-aligned bilinear elements the discrete Laplacian vanishes cell-wise,
which reduces the volume residual to the mass term above, and the normal
derivative is linear along each edge, so the 2-point edge quadrature used
here is exact.  At coarse-fine interfaces, edges are the fine-side
half-edges.  Each interior edge term is attributed to both adjacent cells
in full by default (``attribution="both_full"``; ``"half_each"`` splits
it), which changes only a uniform constant.

The cluster report aggregates edge residual measures and algebraic-error
proxies for a Ritz block into the two reliability bound variants; with the
default constants ``c1 = c_int = 1`` it is a relative diagnostic, not a
certified bound, because the true constants are problem dependent and not
generically computable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .eigensolver import EigenBlock, EigenPair
from .fem import ConstraintSet, DofHandler
from .linalg import Preconditioner

__all__ = [
    "ElementEstimates",
    "ClusterReport",
    "estimate",
    "cluster_report",
    "algebraic_error_proxy",
    "ATTRIBUTIONS",
]

ATTRIBUTIONS = ("both_full", "half_each")

_MASS_PATTERN = np.array([[4.0, 2.0, 1.0, 2.0],
                          [2.0, 4.0, 2.0, 1.0],
                          [1.0, 2.0, 4.0, 2.0],
                          [2.0, 1.0, 2.0, 4.0]])


@dataclass
class ElementEstimates:
    """Squared error indicators of one (mu, v) pair on one tessellation."""

    cell_ids: np.ndarray
    eta_t_sq: np.ndarray
    edge_j_sq: np.ndarray
    volume_sq: np.ndarray
    attribution: str

    @property
    def total_sq(self) -> float:
        return float(self.eta_t_sq.sum())

    @property
    def total(self) -> float:
        return float(np.sqrt(self.total_sq))


def _nodal(cs: ConstraintSet, v: np.ndarray) -> np.ndarray:
    """Accept either a free-dof or a full nodal vector; return nodal."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] == cs.dh.n_dofs:
        return v
    if v.shape[0] == cs.n_free:
        return cs.expand(v)
    raise ValueError(
        f"vector length {v.shape[0]} matches neither the {cs.dh.n_dofs} nodal "
        f"dofs nor the {cs.n_free} free dofs")


def _check_conforming(cs: ConstraintSet, v: np.ndarray) -> None:
    scale = float(np.max(np.abs(v))) if v.size else 0.0
    res = cs.constraint_residual(v)
    if res > 1e-10 * max(scale, np.finfo(float).tiny):
        raise ValueError(
            f"input vector violates hanging-node constraints "
            f"(residual {res:.3e} at scale {scale:.3e})")


def _gradient_profiles(dh: DofHandler, v: np.ndarray):
    """Endpoint values of the per-cell linear normal-derivative profiles.

    For each member cell the x-derivative is a linear function of y alone
    (gx0 at the cell bottom, gx1 at the top) and the y-derivative linear in
    x alone (gy0 left, gy1 right).
    """
    x0, y0, w, h = dh.mesh.cell_boxes(dh.cell_ids)
    vals = v[dh.cell_dofs]
    gx0 = (vals[:, 1] - vals[:, 0]) / w
    gx1 = (vals[:, 2] - vals[:, 3]) / w
    gy0 = (vals[:, 3] - vals[:, 0]) / h
    gy1 = (vals[:, 2] - vals[:, 1]) / h
    return (x0, y0, w, h), (gx0, gx1, gy0, gy1)


def _edge_jumps_sq(dh: DofHandler, v: np.ndarray):
    """(J_E^2 per interior edge, member positions of the two sides)."""
    mesh = dh.mesh
    es = mesh.level_topology(dh.level).edges
    n = es.n_interior
    if n == 0:
        empty = np.empty(0)
        eint = np.empty(0, dtype=np.int64)
        return empty, eint, eint
    (x0, y0, w, h), (gx0, gx1, gy0, gy1) = _gradient_profiles(dh, v)
    pos_in = np.searchsorted(dh.cell_ids, es.cell_in)
    pos_out = np.searchsorted(dh.cell_ids, es.cell_out)
    vertical = es.axis == 0
    ca = np.where(vertical, mesh.vertex_y[es.va], mesh.vertex_x[es.va])
    cb = np.where(vertical, mesh.vertex_y[es.vb], mesh.vertex_x[es.vb])

    def side_values(pos):
        origin = np.where(vertical, y0[pos], x0[pos])
        extent = np.where(vertical, h[pos], w[pos])
        p0 = np.where(vertical, gx0[pos], gy0[pos])
        p1 = np.where(vertical, gx1[pos], gy1[pos])
        slope = (p1 - p0) / extent
        return p0 + slope * (ca - origin), p0 + slope * (cb - origin)

    ina, inb = side_values(pos_in)
    outa, outb = side_values(pos_out)
    d0 = ina - outa
    d1 = inb - outb
    # the jump is linear along the edge: |E| * integral of its square
    j = es.length ** 2 * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0
    return j, pos_in, pos_out


def estimate(dh: DofHandler, cs: ConstraintSet, mu, v=None, *,
             attribution: str = "both_full") -> ElementEstimates:
    """Per-cell squared error indicators for an approximate eigenpair.

    ``mu`` and ``v`` may be passed separately (``v`` as a free-dof or full
    nodal vector) or as a single :class:`~sapinvit.eigensolver.EigenPair`.
    The input must satisfy the hanging-node constraints to 1e-10 relative
    to its own magnitude.
    """
    if v is None and isinstance(mu, EigenPair):
        mu, v = mu.value, mu.vector
    if attribution not in ATTRIBUTIONS:
        raise ValueError(f"attribution must be one of {ATTRIBUTIONS}")
    mu = float(mu)
    if not mu > 0.0:
        raise ValueError("eigenvalue approximation must be positive")
    vn = _nodal(cs, v)
    _check_conforming(cs, vn)
    if not np.all(np.isfinite(vn)):
        raise ValueError("non-finite entries in the input vector")

    _, _, w, h = dh.mesh.cell_boxes(dh.cell_ids)
    vals = vn[dh.cell_dofs]
    # element mass matrix of a w-by-h cell is (w*h/36) * _MASS_PATTERN
    mass_quad = (w * h / 36.0) * np.einsum("ij,jk,ik->i", vals,
                                           _MASS_PATTERN, vals)
    volume_sq = (w * h) * (mu * mu) * mass_quad

    eta = volume_sq.copy()
    j, pos_in, pos_out = _edge_jumps_sq(dh, vn)
    share = 1.0 if attribution == "both_full" else 0.5
    if j.size:
        sj = share * j
        eta += np.bincount(pos_in, weights=sj, minlength=eta.size)
        eta += np.bincount(pos_out, weights=sj, minlength=eta.size)
    return ElementEstimates(dh.cell_ids, eta, j, volume_sq, attribution)


@dataclass
class ClusterReport:
    """Reliability diagnostics for a Ritz block against the next eigenvalue.

    When the spectral gap is violated (``lambda_next <=`` largest Ritz
    value) ``gap_valid`` is False and every bound field is None — there is
    no valid bound in that regime.
    """

    r: int
    values: np.ndarray
    lambda_next: float
    residual_measures: np.ndarray
    algebraic_errors: np.ndarray
    c1: float
    c_int: float
    gap_valid: bool
    c_clust: float | None
    bound_product: float | None
    bound_sqrt: float | None
    bound: float | None


def cluster_report(dh: DofHandler, cs: ConstraintSet, block: EigenBlock,
                   lambda_next: float, algebraic_errors=None,
                   c1: float = 1.0, c_int: float = 1.0) -> ClusterReport:
    """Aggregate cluster reliability bound for an M-orthonormal Ritz block.

    The per-vector residual measure is the interior-edge jump sum of the
    Ritz vector weighted by the reciprocal Ritz value.  With
    ``s = c1^2 * sum(residual_measures) + c_int^2 * sum(algebraic_errors)``
    the reported bound is ``min(c_clust * s, sqrt(s))`` where ``c_clust =
    (lambda_next + max Ritz value) / |lambda_next - max Ritz value|``.
    """
    lam = np.asarray(block.values, dtype=float)
    r = lam.size
    alg = np.zeros(r) if algebraic_errors is None \
        else np.asarray(algebraic_errors, dtype=float)
    if alg.shape != (r,):
        raise ValueError("need one algebraic error value per Ritz vector")
    lambda_next = float(lambda_next)
    j2 = np.empty(r)
    for i in range(r):
        vn = _nodal(cs, block.vectors[:, i])
        _check_conforming(cs, vn)
        jumps, _, _ = _edge_jumps_sq(dh, vn)
        j2[i] = float(jumps.sum()) / lam[i]
    gap_valid = lambda_next > lam[-1]
    if gap_valid:
        c_clust = (lambda_next + lam[-1]) / abs(lambda_next - lam[-1])
        s = c1 * c1 * float(j2.sum()) + c_int * c_int * float(alg.sum())
        bound_product = c_clust * s
        bound_sqrt = float(np.sqrt(s))
        bound = min(bound_product, bound_sqrt)
    else:
        c_clust = bound_product = bound_sqrt = bound = None
    return ClusterReport(r, lam, lambda_next, j2, alg, c1, c_int,
                         gap_valid, c_clust, bound_product, bound_sqrt, bound)


def algebraic_error_proxy(a, m, lam: float, v: np.ndarray,
                          inner_solver: Preconditioner | None = None,
                          tol: float = 1e-10, max_steps: int = 2000) -> float:
    """Squared energy distance of v/lam from the Galerkin solution of A w = M v.

    Solves A w = M v to relative residual ``tol`` — directly when
    ``inner_solver`` is None, otherwise by preconditioned Richardson
    iteration with the given preconditioner — and returns
    ``||w - v/lam||_A^2``.
    """
    v = np.asarray(v, dtype=float)
    lam = float(lam)
    b = m @ v
    if inner_solver is None:
        w = spla.splu(sp.csc_matrix(a)).solve(b)
    else:
        w = np.zeros_like(b)
        bnorm = np.linalg.norm(b)
        for _ in range(max_steps):
            r = b - a @ w
            if np.linalg.norm(r) <= tol * bnorm:
                break
            w = w + inner_solver.apply(r)
        else:
            raise RuntimeError(
                f"inner solve did not reach relative residual {tol:g} "
                f"in {max_steps} steps")
    e = w - v / lam
    return float(e @ (a @ e))
