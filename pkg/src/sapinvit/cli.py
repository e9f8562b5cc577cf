"""Command-line front end for the adaptive eigensolver drivers.

Runs one of the benchmark problems (``unit_square``, ``lshape``,
``dumbbell``) in one of three modes — ``apinvit`` (every level fully
solved), ``sapinvit`` (intermediate levels smoothed), or ``compare``
(both, same seed) — and writes per-level CSV histories, legacy-VTK
meshes with the element estimates attached, reference eigenvalues,
gnuplot-ready error/cost tables, and a plain-text summary.

Configuration comes from flags plus an optional TOML file
(``--config``); flags override the file.  With ``--no-timings`` the CSV
timing columns are zeroed, making the output a bitwise-reproducible
function of configuration and seed in serial mode.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import __version__, oracle
from .adaptivity import AdaptiveConfig, RunHistory, a_pinvit, sa_pinvit

try:  # Python >= 3.11
    import tomllib as _toml
except ImportError:  # pragma: no cover - depends on interpreter version
    import tomli as _toml

PROBLEMS = ("unit_square", "lshape", "dumbbell")
MODES = ("apinvit", "sapinvit", "compare")

# flags that map one-to-one onto AdaptiveConfig fields
_ADAPTIVE_KEYS = {
    "levels": "max_levels",
    "theta": "theta",
    "r": "r",
    "p_ext": "p_ext",
    "p_int": "p_int",
    "max_iter_ext": "max_iter_ext",
    "max_iter_int": "max_iter_int",
    "tol_ext": "tol_ext",
    "tol_int": "tol_int",
    "tol_eta": "tol_eta",
    "seed": "seed",
    "estimate_with": "estimate_with",
    "attribution": "attribution",
    "pre_refinements": "pre_refinements",
    "coarse_threshold": "coarse_threshold",
    "monitor": "monitor",
}
_RUN_KEYS = ("problem", "mode", "output_dir", "threads", "no_timings",
             "no_vtk")


@dataclass
class RunConfig:
    """Fully resolved run configuration (problem/mode/IO + solver knobs)."""

    problem: str = "unit_square"
    mode: str = "apinvit"
    adaptive: AdaptiveConfig = None
    output_dir: str = "."
    threads: int = 1
    include_timings: bool = True
    write_vtk: bool = True

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}; "
                             f"choose from {PROBLEMS}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.adaptive is None:
            self.adaptive = AdaptiveConfig()
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sapinvit",
        description="Adaptive preconditioned inverse iteration for the 2D "
                    "Dirichlet Laplace eigenvalue problem.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", metavar="FILE",
                   help="TOML file with the same keys as the flags below; "
                        "flags override the file")
    p.add_argument("--problem", choices=PROBLEMS, default=None)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--levels", type=int, default=None,
                   help="maximum number of adaptive levels")
    p.add_argument("--theta", type=float, default=None,
                   help="bulk marking fraction in (0, 1]; 1 = uniform")
    p.add_argument("--r", type=int, default=None,
                   help="number of eigenpairs (block size)")
    p.add_argument("--p-ext", default=None, metavar="SPEC",
                   help="preconditioner for fully converged solves, e.g. "
                        "'gmg(1)', 'jacobi(3)', 'chebyshev(2,3)', 'exact'")
    p.add_argument("--p-int", default=None, metavar="SPEC",
                   help="preconditioner for smoothed intermediate solves")
    p.add_argument("--max-iter-ext", type=int, default=None)
    p.add_argument("--max-iter-int", type=int, default=None,
                   help="iteration budget on smoothed levels")
    p.add_argument("--tol-ext", type=float, default=None)
    p.add_argument("--tol-int", type=float, default=None)
    p.add_argument("--tol-eta", type=float, default=None,
                   help="stop once the total error estimate falls below this")
    p.add_argument("--estimate-with", choices=("first", "sum_over_block"),
                   default=None)
    p.add_argument("--attribution", choices=("both_full", "half_each"),
                   default=None)
    p.add_argument("--pre-refinements", type=int, default=None)
    p.add_argument("--coarse-threshold", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--monitor", action="store_const", const=True,
                   default=None,
                   help="record the preconditioner quality monitor each "
                        "iteration (extra cost)")
    p.add_argument("--threads", type=int, default=None,
                   help="thread cap for numerical kernels; 1 = deterministic "
                        "serial mode (default)")
    p.add_argument("--output-dir", default=None, metavar="DIR")
    p.add_argument("--no-timings", action="store_const", const=True,
                   default=None,
                   help="zero the timing columns in CSV output for bitwise "
                        "reproducibility")
    p.add_argument("--no-vtk", action="store_const", const=True, default=None,
                   help="skip per-level VTK mesh output")
    return p


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            data = _toml.load(fh)
    except OSError as exc:
        raise ValueError(f"cannot read config file {path}: {exc}") from exc
    except _toml.TOMLDecodeError as exc:
        raise ValueError(f"invalid config file {path}: {exc}") from exc
    known = set(_ADAPTIVE_KEYS) | set(_RUN_KEYS)
    unknown = set(data) - known
    if unknown:
        raise ValueError(
            f"invalid config file {path}: unknown keys {sorted(unknown)}")
    return data


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge config file and flags (flags win) into a RunConfig."""
    settings = _load_config_file(args.config) if args.config else {}
    for key in list(_ADAPTIVE_KEYS) + list(_RUN_KEYS):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value

    adaptive_kwargs = {dest: settings[key]
                       for key, dest in _ADAPTIVE_KEYS.items()
                       if key in settings}
    valid = {f.name for f in fields(AdaptiveConfig)}
    assert set(adaptive_kwargs) <= valid
    return RunConfig(
        problem=settings.get("problem", "unit_square"),
        mode=settings.get("mode", "apinvit"),
        adaptive=AdaptiveConfig(**adaptive_kwargs),
        output_dir=settings.get("output_dir", "."),
        threads=int(settings.get("threads", 1)),
        include_timings=not settings.get("no_timings", False),
        write_vtk=not settings.get("no_vtk", False),
    )


def _apply_thread_cap(threads: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


def write_vtk(path, mesh, cell_ids, cell_data=None, point_data=None) -> None:
    """Write a mesh (plus optional per-cell / per-vertex scalars) as legacy VTK.

    All mesh vertices are emitted; connectivity covers the given cells.
    """
    cell_data = cell_data or {}
    point_data = point_data or {}
    ids = np.asarray(sorted(cell_ids), dtype=np.int64)
    conn = mesh.cell_vertices[ids]
    n_pts = mesh.n_vertices
    out = ["# vtk DataFile Version 3.0",
           f"domain={mesh.domain} cells={ids.size}",
           "ASCII",
           "DATASET UNSTRUCTURED_GRID",
           f"POINTS {n_pts} double"]
    pts = np.column_stack([mesh.vertex_x, mesh.vertex_y, np.zeros(n_pts)])
    out.extend(" ".join(f"{c:.17g}" for c in row) for row in pts)
    out.append(f"CELLS {ids.size} {5 * ids.size}")
    out.extend("4 " + " ".join(str(v) for v in row) for row in conn)
    out.append(f"CELL_TYPES {ids.size}")
    out.extend(["9"] * ids.size)  # VTK_QUAD
    if cell_data:
        out.append(f"CELL_DATA {ids.size}")
        for name, values in cell_data.items():
            values = np.asarray(values, dtype=float)
            if values.size != ids.size:
                raise ValueError(f"cell data {name!r} has wrong length")
            out.append(f"SCALARS {name} double 1")
            out.append("LOOKUP_TABLE default")
            out.extend(f"{v:.17g}" for v in values)
    if point_data:
        out.append(f"POINT_DATA {n_pts}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=float)
            if values.size != n_pts:
                raise ValueError(f"point data {name!r} has wrong length")
            out.append(f"SCALARS {name} double 1")
            out.append("LOOKUP_TABLE default")
            out.extend(f"{v:.17g}" for v in values)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")


def _vtk_callback(out_dir, tag=""):
    suffix = f"_{tag}" if tag else ""

    def callback(level, mesh, dh, cs, block, estimates, is_last):
        order = np.argsort(estimates.cell_ids)
        ids = estimates.cell_ids[order]
        nodal = np.zeros(mesh.n_vertices)
        nodal[dh.dof_to_vertex] = cs.expand(block.vectors[:, 0])
        write_vtk(os.path.join(out_dir, f"mesh{suffix}_L{level:02d}.vtk"),
                  mesh, ids,
                  cell_data={"eta_sq": estimates.eta_t_sq[order]},
                  point_data={"u_1": nodal})

    return callback


def _reference_for(cfg: RunConfig, history: RunHistory):
    """Best available reference spectrum for error plots and the summary."""
    r = cfg.adaptive.r
    if cfg.problem == "unit_square":
        return oracle.analytic_square_spectrum(r)
    if len(history.records) >= 3:
        try:
            return oracle.extrapolated_reference(cfg.problem, history, r)
        except ValueError as exc:
            print(f"warning: extrapolation failed ({exc})", file=sys.stderr)
    if history.final_dh is not None and history.final_dh.n_dofs <= 2000:
        return oracle.dense_reference(cfg.problem, history.final_mesh, r)
    return None


def emit_plot_data(histories: dict, reference, out_dir) -> None:
    """Write gnuplot-ready error and cost tables for each history.

    Error tables hold (n_dofs, relative eigenvalue errors) suitable for
    log-log axes; cost tables hold the per-level stage times.  With two
    histories an additional table pairs their columns level by level.
    """
    for tag, history in histories.items():
        err_path = os.path.join(out_dir, f"convergence_{tag}.dat")
        with open(err_path, "w", encoding="utf-8") as fh:
            if not history.records:
                print(f"warning: empty history for {tag}; wrote empty "
                      f"{err_path}", file=sys.stderr)
                continue
            r = history.r
            if reference is not None and reference.r >= r:
                cols = " ".join(f"relerr_{i + 1}" for i in range(r))
                fh.write(f"# n_dofs {cols}\n")
                for rec in history.records:
                    errs = np.abs(rec.eigenvalues - reference.values[:r]) \
                        / reference.values[:r]
                    fh.write(f"{rec.n_dofs} "
                             + " ".join(f"{e:.17g}" for e in errs) + "\n")
            else:
                print(f"warning: no reference available; {err_path} holds "
                      "raw eigenvalues", file=sys.stderr)
                cols = " ".join(f"lambda_{i + 1}" for i in range(r))
                fh.write(f"# n_dofs {cols}\n")
                for rec in history.records:
                    fh.write(f"{rec.n_dofs} "
                             + " ".join(f"{v:.17g}" for v in rec.eigenvalues)
                             + "\n")
        cost_path = os.path.join(out_dir, f"cost_{tag}.dat")
        with open(cost_path, "w", encoding="utf-8") as fh:
            fh.write("# level n_dofs t_solve_s t_estimate_s t_mark_s "
                     "t_refine_s\n")
            for rec in history.records:
                fh.write(f"{rec.level} {rec.n_dofs} {rec.t_solve:.6f} "
                         f"{rec.t_estimate:.6f} {rec.t_mark:.6f} "
                         f"{rec.t_refine:.6f}\n")

    if len(histories) == 2:
        (tag_a, hist_a), (tag_b, hist_b) = histories.items()
        path = os.path.join(out_dir, "compare.dat")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# level n_dofs_{tag_a} lambda1_{tag_a} time_{tag_a} "
                     f"n_dofs_{tag_b} lambda1_{tag_b} time_{tag_b}\n")
            for ra, rb in zip(hist_a.records, hist_b.records):
                ta = ra.t_solve + ra.t_estimate + ra.t_mark + ra.t_refine
                tb = rb.t_solve + rb.t_estimate + rb.t_mark + rb.t_refine
                fh.write(f"{ra.level} {ra.n_dofs} {ra.eigenvalues[0]:.17g} "
                         f"{ta:.6f} {rb.n_dofs} {rb.eigenvalues[0]:.17g} "
                         f"{tb:.6f}\n")


def _summary_lines(cfg: RunConfig, histories: dict, reference) -> list[str]:
    lines = [f"problem: {cfg.problem}",
             f"mode: {cfg.mode}",
             f"seed: {cfg.adaptive.seed}",
             f"theta: {cfg.adaptive.theta}",
             f"r: {cfg.adaptive.r}",
             ""]
    for tag, h in histories.items():
        rec = h.records[-1]
        lines.append(f"[{tag}]")
        lines.append(f"  levels run: {len(h.records)}")
        lines.append(f"  final cells: {rec.n_cells}")
        lines.append(f"  final dofs: {rec.n_dofs}")
        for i, v in enumerate(rec.eigenvalues, start=1):
            lines.append(f"  lambda_{i}: {v:.12g}")
        lines.append(f"  eta_total: {rec.eta_total:.6g}")
        if h.stop_certificate is not None:
            lines.append(f"  stop certificate |dlambda_1|/lambda_1: "
                         f"{h.stop_certificate:.3g}")
        if h.ext_converged is not None:
            lines.append(f"  final solve converged: {h.ext_converged}")
        lines.append(f"  total time: {h.total_time():.3f} s")
        lines.append("")
    if reference is not None:
        lines.append(f"reference ({reference.provenance}):")
        for i, (v, u) in enumerate(zip(reference.values,
                                       reference.uncertainties), start=1):
            lines.append(f"  lambda_{i}: {v:.12g} +/- {u:.2g}")
        lines.append("")
    if len(histories) == 2:
        (tag_a, ha), (tag_b, hb) = histories.items()
        ta, tb = ha.total_time(), hb.total_time()
        if tb > 0:
            lines.append(f"speedup t_{tag_a}/t_{tag_b}: {ta / tb:.2f}")
        ca = ha.records[-1].n_cells
        cb = hb.records[-1].n_cells
        lines.append(f"final cell counts: {tag_a}={ca} {tag_b}={cb} "
                     f"(ratio {cb / ca:.4f})")
        la = ha.records[-1].eigenvalues[0]
        lb = hb.records[-1].eigenvalues[0]
        lines.append(f"final lambda_1 relative difference: "
                     f"{abs(la - lb) / la:.3g}")
    return lines


def run(cfg: RunConfig) -> int:
    """Execute the configured run and write all artifacts; 0 on success."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    if not os.access(cfg.output_dir, os.W_OK):
        print(f"error: output directory {cfg.output_dir} is not writable",
              file=sys.stderr)
        return 1

    drivers = {"apinvit": [("apinvit", a_pinvit)],
               "sapinvit": [("sapinvit", sa_pinvit)],
               "compare": [("apinvit", a_pinvit), ("sapinvit", sa_pinvit)]}
    histories: dict[str, RunHistory] = {}
    try:
        for tag, driver in drivers[cfg.mode]:
            vtk_tag = tag if cfg.mode == "compare" else ""
            callback = _vtk_callback(cfg.output_dir, vtk_tag) \
                if cfg.write_vtk else None
            histories[tag] = driver(cfg.problem, cfg.adaptive,
                                    level_callback=callback)
    except (RuntimeError, ValueError) as exc:
        print(f"error: solver failed: {exc}", file=sys.stderr)
        return 1

    if cfg.mode == "compare":
        for tag, h in histories.items():
            h.to_csv(os.path.join(cfg.output_dir, f"history_{tag}.csv"),
                     include_timings=cfg.include_timings)
    else:
        next(iter(histories.values())).to_csv(
            os.path.join(cfg.output_dir, "history.csv"),
            include_timings=cfg.include_timings)

    ref_history = histories.get("apinvit") or next(iter(histories.values()))
    reference = _reference_for(cfg, ref_history)
    if reference is not None:
        oracle.write_reference_csv(
            reference, os.path.join(cfg.output_dir, "reference.csv"))

    emit_plot_data(histories, reference, cfg.output_dir)
    summary = _summary_lines(cfg, histories, reference)
    with open(os.path.join(cfg.output_dir, "summary.txt"), "w",
              encoding="utf-8") as fh:
        fh.write("\n".join(summary) + "\n")
    print("\n".join(summary))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _apply_thread_cap(cfg.threads)
    return run(cfg)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
