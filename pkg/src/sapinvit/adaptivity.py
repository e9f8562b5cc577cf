"""Bulk marking and the adaptive eigensolver driver loops.

Two drivers share one loop (solve -> estimate -> mark -> refine, with the
previous block prolonged as the next initial guess):

- :func:`a_pinvit` solves every level to the external tolerance — the
  fully converged reference driver;
- :func:`sa_pinvit` solves the first and final level to the external
  tolerance but applies only a fixed small budget of preconditioned
  iterations on intermediate levels, trading per-level accuracy for
  overall speed while the estimator keeps driving the same refinement.

When the smoothed driver's parameters degenerate to the external ones it
executes exactly the same operation sequence as the reference driver, so
the two histories agree bitwise in serial mode — a structural guarantee
the test-suite checks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import estimator as estimator_mod
from . import fem
from . import linalg
from . import mesh as mesh_mod
from .eigensolver import EigenBlock, SolverParams, bpinvit, m_orthonormalize

__all__ = [
    "AdaptiveConfig",
    "LevelRecord",
    "RunHistory",
    "doerfler_mark",
    "prolong_block",
    "a_pinvit",
    "sa_pinvit",
    "DEFAULT_PRE_REFINEMENTS",
]

# uniform refinements applied to the coarse domain grids before level 1 so
# that the first solve has a usable number of interior dofs
DEFAULT_PRE_REFINEMENTS = {"unit_square": 1, "lshape": 1, "dumbbell": 2}

HISTORY_COLUMNS = ("level", "n_cells", "n_dofs", "lambda", "eta_total",
                   "t_solve_s", "t_estimate_s", "t_mark_s", "t_refine_s",
                   "solver_iters")


@dataclass
class AdaptiveConfig:
    """Parameters of one adaptive run.

    ``p_ext``/``p_int`` are preconditioner descriptions in the text form of
    :func:`sapinvit.linalg.make_preconditioner`; the ``*_ext`` parameters
    govern the first and final level (and, in the reference driver, every
    level), the ``*_int`` parameters the intermediate levels of the
    smoothed driver.  ``tol_eta`` stops the loop early once the total
    estimator drops below it; the default is a positive value small enough
    to never trigger.
    """

    max_levels: int = 10
    tol_eta: float = 1e-30
    p_ext: str = "gmg(1)"
    p_int: str = "gmg(2)"
    tol_ext: float = 1e-12
    tol_int: float = 1e-12
    max_iter_ext: int = 500
    max_iter_int: int = 1
    r: int = 1
    theta: float = 0.5
    estimate_with: str = "first"
    attribution: str = "both_full"
    seed: int = 42
    pre_refinements: int | None = None
    coarse_threshold: int = 512
    monitor: bool = False

    def __post_init__(self):
        if self.max_levels < 1:
            raise ValueError("max_levels must be >= 1")
        for name in ("tol_eta", "tol_ext", "tol_int"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if self.max_iter_ext < 1 or self.max_iter_int < 1:
            raise ValueError("iteration budgets must be >= 1")
        if self.r < 1:
            raise ValueError("block size r must be >= 1")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("marking parameter theta must be in (0, 1]")
        if self.estimate_with not in ("first", "sum_over_block"):
            raise ValueError("estimate_with must be 'first' or 'sum_over_block'")
        if self.attribution not in estimator_mod.ATTRIBUTIONS:
            raise ValueError(
                f"attribution must be one of {estimator_mod.ATTRIBUTIONS}")


@dataclass
class LevelRecord:
    """One row of an adaptive run: sizes, eigenvalues, estimator, timings.

    ``t_solve`` measures only the eigensolver (including preconditioner
    construction); mesh/dof/matrix setup is tracked separately in
    ``t_setup``, which contributes to total time but not to the CSV stage
    columns.
    """

    level: int
    n_cells: int
    n_dofs: int
    eigenvalues: np.ndarray
    eta_total: float
    t_solve: float = 0.0
    t_estimate: float = 0.0
    t_mark: float = 0.0
    t_refine: float = 0.0
    solver_iters: int = 0
    t_setup: float = 0.0


@dataclass
class RunHistory:
    """Ordered level records plus the final block and run metadata.

    ``stop_certificate`` is the relative change of the lowest eigenvalue
    over the last two levels (None for single-level runs);
    ``ext_converged`` reports whether the final solve hit its stop
    tolerance within the iteration budget.
    """

    records: list[LevelRecord] = field(default_factory=list)
    final_block: EigenBlock | None = None
    config: AdaptiveConfig | None = None
    mode: str = ""
    problem: str = ""
    stop_certificate: float | None = None
    ext_converged: bool | None = None
    stopped_by_eta: bool = False
    final_mesh: mesh_mod.Mesh | None = None
    final_dh: fem.DofHandler | None = None
    final_cs: fem.ConstraintSet | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def r(self) -> int:
        return int(self.records[0].eigenvalues.size) if self.records else 0

    def eigenvalue_table(self) -> np.ndarray:
        """(n_levels, r) array of per-level eigenvalues."""
        return np.array([rec.eigenvalues for rec in self.records])

    def dof_counts(self) -> np.ndarray:
        return np.array([rec.n_dofs for rec in self.records])

    def total_time(self) -> float:
        return sum(rec.t_setup + rec.t_solve + rec.t_estimate + rec.t_mark
                   + rec.t_refine for rec in self.records)

    def to_csv(self, path=None, include_timings: bool = True) -> str:
        """Serialize the per-level table; header and column order are stable.

        ``include_timings=False`` writes zeros in the timing columns, which
        makes the output a bitwise-reproducible function of config + seed.
        """
        r = self.r
        cols = (["level", "n_cells", "n_dofs"]
                + [f"lambda_{i + 1}" for i in range(r)]
                + ["eta_total", "t_solve_s", "t_estimate_s", "t_mark_s",
                   "t_refine_s", "solver_iters"])
        lines = [",".join(cols)]
        for rec in self.records:
            times = (rec.t_solve, rec.t_estimate, rec.t_mark, rec.t_refine) \
                if include_timings else (0.0, 0.0, 0.0, 0.0)
            fields = ([str(rec.level), str(rec.n_cells), str(rec.n_dofs)]
                      + [f"{v:.17g}" for v in rec.eigenvalues]
                      + [f"{rec.eta_total:.17g}"]
                      + [f"{t:.6f}" for t in times]
                      + [str(rec.solver_iters)])
            lines.append(",".join(fields))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


def doerfler_mark(est: estimator_mod.ElementEstimates, theta: float):
    """Greedy minimal bulk-marked cell set.

    Cells are ranked by decreasing squared indicator (ties by ascending
    cell id) and accumulated until their sum reaches ``theta`` times the
    total.  Returns ``(marked_ids, converged)`` where ``converged`` is True
    exactly when every indicator is zero (nothing to mark).
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError("marking parameter theta must be in (0, 1]")
    eta = np.asarray(est.eta_t_sq, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise ValueError("non-finite estimator values")
    total = float(eta.sum())
    if total == 0.0:
        return set(), True
    nz = np.flatnonzero(eta > 0.0)
    order = nz[np.lexsort((est.cell_ids[nz], -eta[nz]))]
    csum = np.cumsum(eta[order])
    k = int(np.searchsorted(csum, theta * total, side="left"))
    k = min(k, order.size - 1)
    marked = set(int(c) for c in est.cell_ids[order[:k + 1]])
    return marked, False


def prolong_block(block: np.ndarray, p_nodal, coarse_cs: fem.ConstraintSet,
                  fine_cs: fem.ConstraintSet, m_fine) -> np.ndarray:
    """Carry a free-dof block from a coarse level into a fine one.

    Expands to nodal values, applies the nodal injection, re-imposes the
    fine constraints, and M-orthonormalizes.  The result spans the same
    functions, now expressed on the fine level.
    """
    v = np.asarray(block, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    fine_free = fine_cs.reduce(p_nodal @ coarse_cs.expand(v))
    return m_orthonormalize(m_fine, fine_free)


def _initial_mesh(problem, pre_refinements) -> mesh_mod.Mesh:
    if isinstance(problem, mesh_mod.Mesh):
        return problem
    msh = mesh_mod.make_grid(problem)
    n = DEFAULT_PRE_REFINEMENTS[problem] if pre_refinements is None \
        else int(pre_refinements)
    for _ in range(n):
        msh = mesh_mod.uniform_refine(msh)
    return msh


def _estimate_block(dh, cs, block: EigenBlock, config: AdaptiveConfig):
    """Estimator input per config: first Ritz pair, or the block sum."""
    first = estimator_mod.estimate(dh, cs, block.values[0], block.vectors[:, 0],
                                   attribution=config.attribution)
    if config.estimate_with == "first" or block.r == 1:
        return first
    eta = first.eta_t_sq.copy()
    jsq = first.edge_j_sq.copy()
    vol = first.volume_sq.copy()
    for i in range(1, block.r):
        e = estimator_mod.estimate(dh, cs, block.values[i], block.vectors[:, i],
                                   attribution=config.attribution)
        eta += e.eta_t_sq
        jsq += e.edge_j_sq
        vol += e.volume_sq
    return estimator_mod.ElementEstimates(first.cell_ids, eta, jsq, vol,
                                          config.attribution)


def _run_driver(problem, config: AdaptiveConfig, mode: str,
                level_callback=None) -> RunHistory:
    rng = np.random.default_rng(config.seed)
    msh = _initial_mesh(problem, config.pre_refinements)
    history = RunHistory(config=config, mode=mode,
                         problem=getattr(msh, "domain", str(problem)))
    prev = None  # (dh, cs, free block) of the previous level
    hier = None

    level = 0
    while True:
        level += 1
        tic = time.perf_counter()
        dh = fem.distribute_dofs(msh)
        cs = fem.build_constraints(dh)
        a, m = fem.assemble_operators(dh, cs)

        if prev is None:
            if cs.n_free < config.r:
                raise ValueError(
                    f"level 1 has {cs.n_free} free dofs < block size "
                    f"{config.r}; increase pre_refinements")
            hier = fem.build_gmg_hierarchy(
                msh, coarse_threshold=config.coarse_threshold,
                finest=(dh, cs, a))
            v0 = cs.reduce(rng.uniform(-1.0, 1.0, (dh.n_dofs, config.r)))
        else:
            p_nodal = fem.prolongation(prev[0], dh)
            hier = fem.extend_gmg_hierarchy(
                hier, a, fem.reduced_transfer(prev[1], cs, p_nodal))
            v0 = prolong_block(prev[2], p_nodal, prev[1], cs, m)
        t_setup = time.perf_counter() - tic

        tic = time.perf_counter()
        is_last = level == config.max_levels
        use_ext = (mode == "apinvit") or level == 1 or is_last
        params = _solver_params(config, a, hier, external=use_ext)
        try:
            block, log = bpinvit(a, m, v0, params)
        except (ArithmeticError, linalg.RankDeficientError) as exc:
            raise RuntimeError(f"solver failed on level {level}: {exc}") from exc
        iters = len(log)
        ext_converged = log.converged if use_ext else None
        t_solve = time.perf_counter() - tic

        tic = time.perf_counter()
        est = _estimate_block(dh, cs, block, config)
        eta_total = est.total
        t_estimate = time.perf_counter() - tic

        stop_eta = eta_total < config.tol_eta
        if stop_eta and not use_ext:
            # estimator target met on a smoothed level: finish with the
            # external solve on the current mesh before stopping
            tic = time.perf_counter()
            params = _solver_params(config, a, hier, external=True)
            block, log = bpinvit(a, m, block.vectors, params)
            iters += len(log)
            ext_converged = log.converged
            t_solve += time.perf_counter() - tic
            tic = time.perf_counter()
            est = _estimate_block(dh, cs, block, config)
            eta_total = est.total
            t_estimate += time.perf_counter() - tic

        record = LevelRecord(level, msh.n_active_cells, dh.n_dofs,
                             np.array(block.values), eta_total,
                             t_solve=t_solve, t_estimate=t_estimate,
                             solver_iters=iters, t_setup=t_setup)

        done = stop_eta or is_last
        marked = set()
        if not done:
            tic = time.perf_counter()
            marked, est_converged = doerfler_mark(est, config.theta)
            record.t_mark = time.perf_counter() - tic
            done = est_converged

        if level_callback is not None:
            level_callback(level=level, mesh=msh, dh=dh, cs=cs, block=block,
                           estimates=est, is_last=done)

        if done:
            history.records.append(record)
            history.final_block = block
            history.final_mesh, history.final_dh, history.final_cs = msh, dh, cs
            history.stopped_by_eta = stop_eta
            history.ext_converged = ext_converged
            break

        tic = time.perf_counter()
        new_mesh = mesh_mod.refine(msh, marked)
        record.t_refine = time.perf_counter() - tic
        history.records.append(record)

        prev = (dh, cs, block.vectors)
        msh = new_mesh

    if len(history.records) >= 2:
        lam_fin = history.records[-1].eigenvalues[0]
        lam_prev = history.records[-2].eigenvalues[0]
        history.stop_certificate = abs(lam_fin - lam_prev) / abs(lam_prev)
    return history


def _solver_params(config: AdaptiveConfig, a, hier, external: bool) -> SolverParams:
    spec = config.p_ext if external else config.p_int
    precond = linalg.make_preconditioner(spec, a=a, hierarchy=hier)
    return SolverParams(
        max_iter=config.max_iter_ext if external else config.max_iter_int,
        tol=config.tol_ext if external else config.tol_int,
        preconditioner=precond,
        monitor=config.monitor,
    )


def a_pinvit(problem, config: AdaptiveConfig, level_callback=None) -> RunHistory:
    """Adaptive loop solving every level to the external tolerance."""
    return _run_driver(problem, config, "apinvit", level_callback)


def sa_pinvit(problem, config: AdaptiveConfig, level_callback=None) -> RunHistory:
    """Adaptive loop with fixed-budget smoothing on intermediate levels.

    The first and final levels use the external solver parameters; every
    level in between runs only ``max_iter_int`` iterations with the
    internal preconditioner, seeded by the prolonged previous block.  If
    the estimator drops below ``tol_eta`` on an intermediate level, the
    driver finishes with an external solve on the current mesh.
    """
    return _run_driver(problem, config, "sapinvit", level_callback)
