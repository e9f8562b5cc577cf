"""Preconditioned inverse iteration for the lowest generalized eigenpairs.

Single-vector (:func:`pinvit`) and block (:func:`bpinvit`) iterations for
the SPD pencil (A, M).  One step subtracts the preconditioned eigenvalue
residual, v <- v - P^-1 (A v - mu M v); the block variant follows with a
Rayleigh-Ritz projection onto the iterated subspace.  Iterations stop on
the relative change of the Rayleigh quotient (Ritz values in the block
case, Frobenius norm of the value diagonal) or at ``max_iter``.

Returned vectors are M-normalized (blocks M-orthonormal); all randomness
is the caller's responsibility, so solver runs are deterministic functions
of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import (
    Preconditioner,
    RankDeficientError,
    dense_generalized_eig,
    precond_residual,
    rayleigh_quotient,
)

__all__ = [
    "SolverParams",
    "EigenPair",
    "EigenBlock",
    "ConvergenceLog",
    "m_orthonormalize",
    "pinvit",
    "bpinvit",
    "ritz_project",
    "error_propagation_check",
]


@dataclass
class SolverParams:
    """Iteration budget, stop tolerance, and preconditioner of one solve.

    ``monitor=True`` additionally evaluates the preconditioner-quality
    monitor on the first iterate column each iteration (extra matrix and
    preconditioner applications; off by default).
    """

    max_iter: int
    tol: float
    preconditioner: Preconditioner
    monitor: bool = False

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol > 0.0:
            raise ValueError("tol must be positive")


@dataclass
class EigenPair:
    """An M-normalized approximate eigenvector with its Rayleigh quotient."""

    value: float
    vector: np.ndarray
    residual_norm: float


@dataclass
class EigenBlock:
    """r M-orthonormal Ritz vectors with ascending Ritz values."""

    vectors: np.ndarray
    values: np.ndarray
    residual_norms: np.ndarray

    @property
    def r(self) -> int:
        return int(self.values.size)


class ConvergenceLog:
    """Per-iteration Ritz values, residual norms, and monitor values."""

    def __init__(self, r: int = 1):
        self.r = int(r)
        self.iterations: list[int] = []
        self.values: list[np.ndarray] = []
        self.residual_norms: list[np.ndarray] = []
        self.monitors: list[float] = []
        self.converged: bool = False

    def __len__(self) -> int:
        return len(self.iterations)

    def append(self, iteration: int, values, residual_norms,
               monitor: float = float("nan")) -> None:
        self.iterations.append(int(iteration))
        self.values.append(np.atleast_1d(np.asarray(values, dtype=float)))
        self.residual_norms.append(
            np.atleast_1d(np.asarray(residual_norms, dtype=float)))
        self.monitors.append(float(monitor))

    def to_csv(self, path=None) -> str:
        """Serialize as CSV; write to ``path`` when given, return the text."""
        cols = (["iter"]
                + [f"mu_{i + 1}" for i in range(self.r)]
                + [f"resnorm_{i + 1}" for i in range(self.r)]
                + ["precond_monitor"])
        lines = [",".join(cols)]
        for it, vals, res, mon in zip(self.iterations, self.values,
                                      self.residual_norms, self.monitors):
            fields = ([str(it)]
                      + [f"{v:.17g}" for v in vals]
                      + [f"{v:.17g}" for v in res]
                      + [f"{mon:.17g}"])
            lines.append(",".join(fields))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


def m_orthonormalize(m, block: np.ndarray, passes: int = 2) -> np.ndarray:
    """M-orthonormalize the columns of ``block`` by modified Gram-Schmidt.

    Two passes by default (classical "twice is enough" safeguard).  Raises
    RankDeficientError when a column loses essentially all of its M-norm
    against the previous ones.
    """
    v = np.array(block, dtype=float, copy=True)
    if v.ndim != 2:
        raise ValueError("expected a 2D column block")
    mcols = []
    for j in range(v.shape[1]):
        w = v[:, j]
        norm0 = np.sqrt(w @ (m @ w))
        for _ in range(passes):
            for mc, vc in mcols:
                w = w - (mc @ w) * vc
        nrm = np.sqrt(w @ (m @ w))
        if not nrm > 1e-13 * max(norm0, np.finfo(float).tiny):
            raise RankDeficientError(
                f"column {j} is numerically dependent on the previous columns")
        w = w / nrm
        v[:, j] = w
        mcols.append((m @ w, w))
    return v


def _ritz_full(a, m, block: np.ndarray):
    """Rayleigh-Ritz step; returns (values, vectors, A@vectors, M@vectors)."""
    av = a @ block
    mv = m @ block
    ar = block.T @ av
    mr = block.T @ mv
    lam, w = dense_generalized_eig(ar, mr)
    return lam, block @ w, av @ w, mv @ w


def pinvit(a, m, v0: np.ndarray, params: SolverParams):
    """Preconditioned inverse iteration toward the lowest eigenpair.

    Returns (EigenPair, ConvergenceLog).  Stops when the relative change
    of the Rayleigh quotient drops to ``params.tol`` or after
    ``params.max_iter`` iterations.
    """
    v = np.array(v0, dtype=float, copy=True)
    if v.ndim != 1:
        raise ValueError("pinvit expects a single vector; use bpinvit for blocks")
    if not np.any(v):
        raise ValueError("zero initial vector")
    p = params.preconditioner
    v = v / np.sqrt(v @ (m @ v))
    mu = rayleigh_quotient(a, m, v)
    log = ConvergenceLog(1)
    resid = float(np.linalg.norm(a @ v - mu * (m @ v)))
    for it in range(1, params.max_iter + 1):
        r = a @ v - mu * (m @ v)
        vt = v - p.apply(r)
        mvt = m @ vt
        nrm2 = vt @ mvt
        if not (np.isfinite(nrm2) and nrm2 > 0.0):
            raise ArithmeticError(
                "iteration broke down (non-positive or non-finite M-norm); "
                "is the preconditioner positive definite?")
        v = vt / np.sqrt(nrm2)
        av = a @ v
        mv = m @ v
        mu_new = float((v @ av) / (v @ mv))
        if not np.isfinite(mu_new):
            raise ArithmeticError("non-finite Rayleigh quotient encountered")
        resid = float(np.linalg.norm(av - mu_new * mv))
        mon = precond_residual(a, p, v) if params.monitor else float("nan")
        log.append(it, [mu_new], [resid], mon)
        delta = abs(mu_new - mu) / abs(mu)
        mu = mu_new
        if delta <= params.tol:
            log.converged = True
            break
    return EigenPair(mu, v, resid), log


def bpinvit(a, m, v0: np.ndarray, params: SolverParams):
    """Block preconditioned inverse iteration with Ritz projection.

    Returns (EigenBlock, ConvergenceLog).  The stop rule is the relative
    change of the Ritz-value vector in the 2-norm (Frobenius norm of the
    value diagonal).  A numerically rank-deficient Ritz compression is
    retried once after re-orthonormalizing the block against M.
    """
    v = np.array(v0, dtype=float, copy=True)
    if v.ndim == 1:
        v = v[:, None]
    if not np.any(v):
        raise ValueError("zero initial block")
    p = params.preconditioner
    v = m_orthonormalize(m, v)
    lam, v, av, mv = _ritz_full(a, m, v)
    log = ConvergenceLog(v.shape[1])
    resn = np.linalg.norm(av - mv * lam[None, :], axis=0)
    for it in range(1, params.max_iter + 1):
        r = av - mv * lam[None, :]
        vt = v - p.apply(r)
        try:
            lam_new, vn, avn, mvn = _ritz_full(a, m, vt)
        except RankDeficientError:
            vt = m_orthonormalize(m, vt)
            lam_new, vn, avn, mvn = _ritz_full(a, m, vt)
        if not np.all(np.isfinite(lam_new)):
            raise ArithmeticError("non-finite Ritz values encountered")
        resn = np.linalg.norm(avn - mvn * lam_new[None, :], axis=0)
        mon = precond_residual(a, p, vn[:, 0]) if params.monitor else float("nan")
        log.append(it, lam_new, resn, mon)
        delta = np.linalg.norm(lam_new - lam) / np.linalg.norm(lam)
        v, lam, av, mv = vn, lam_new, avn, mvn
        if delta <= params.tol:
            log.converged = True
            break
    return EigenBlock(v, lam, resn), log


def ritz_project(a, m, block: np.ndarray):
    """Rayleigh-Ritz projection onto span(block).

    Returns (values ascending, M-orthonormal Ritz vectors).  Raises
    RankDeficientError for a numerically rank-deficient block.
    """
    v = np.asarray(block, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    lam, vn, _, _ = _ritz_full(a, m, v)
    return lam, vn


def _as_dense(a) -> np.ndarray:
    return a.toarray() if hasattr(a, "toarray") else np.asarray(a, dtype=float)


def error_propagation_check(a, m, p: Preconditioner, v: np.ndarray) -> float:
    """Defect of the one-step error recursion of the iteration (test support).

    With x = A^-1 M v and one un-normalized step vt = v - P^-1(Av - mu Mv),
    the identity vt - mu x = (I - P^-1 A)(v - mu x) holds exactly for any
    linear P; the returned norm of the difference of the two sides is pure
    roundoff.  Small systems only (a dense solve of A x = M v is taken).
    """
    v = np.asarray(v, dtype=float)
    mu = rayleigh_quotient(a, m, v)
    x = np.linalg.solve(_as_dense(a), m @ v)
    vt = v - p.apply(a @ v - mu * (m @ v))
    lhs = vt - mu * x
    e = v - mu * x
    rhs = e - p.apply(a @ e)
    return float(np.linalg.norm(lhs - rhs))
