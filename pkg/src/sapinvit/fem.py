"""Q1 finite elements on hierarchical quad meshes.

Bilinear elements on axis-aligned rectangles with exact 2x2 Gauss
quadrature, homogeneous Dirichlet boundary conditions and midpoint
hanging-node constraints.  Constraints are condensed: the assembled
operators act on the free (unconstrained, interior) dofs only and are
symmetric positive definite, which is what the smoothers and eigensolvers
expect.  Nodal vectors of full length (one value per mesh vertex of the
tessellation) are used at the interface to the estimator and for transfer
between meshes; :class:`ConstraintSet` converts between the two.

Dof numbering is deterministic: vertices sorted lexicographically by
coordinates, ties broken by creation order.
"""

from __future__ import annotations

import numpy as np
import scipy.io
import scipy.sparse as sp

from . import linalg
from .mesh import Mesh, _ORIGIN_CENTER, _ORIGIN_EDGE_MID

__all__ = [
    "DofHandler",
    "ConstraintSet",
    "distribute_dofs",
    "build_constraints",
    "assemble_stiffness",
    "assemble_mass",
    "assemble_operators",
    "prolongation",
    "reduced_transfer",
    "fe_value_and_gradient",
    "local_stiffness",
    "local_mass",
    "build_gmg_hierarchy",
    "extend_gmg_hierarchy",
    "dump_matrix",
]

# 2-point Gauss rule on [0, 1]; exact for the Q1 stiffness and mass integrands
_GP = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
_GW = np.array([0.5, 0.5])


def _shape(xi, eta):
    """Values of the 4 bilinear shape functions at (xi, eta) in [0,1]^2."""
    return np.array([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta])


def _shape_grad(xi, eta):
    """Reference gradients (d/dxi, d/deta) of the 4 shape functions."""
    return np.array([
        [-(1 - eta), -(1 - xi)],
        [(1 - eta), -xi],
        [eta, xi],
        [-eta, (1 - xi)],
    ])


def local_stiffness(w: float, h: float) -> np.ndarray:
    """Element stiffness matrix of a w-by-h rectangle (2x2 Gauss, exact).

    In 2D the result is invariant under uniform scaling of the cell.
    """
    k = np.zeros((4, 4))
    for a, xi in enumerate(_GP):
        for b, eta in enumerate(_GP):
            g = _shape_grad(xi, eta)
            wq = _GW[a] * _GW[b]
            k += wq * ((h / w) * np.outer(g[:, 0], g[:, 0])
                       + (w / h) * np.outer(g[:, 1], g[:, 1]))
    return k


def local_mass(w: float, h: float) -> np.ndarray:
    """Element mass matrix of a w-by-h rectangle (2x2 Gauss, exact)."""
    m = np.zeros((4, 4))
    for a, xi in enumerate(_GP):
        for b, eta in enumerate(_GP):
            n = _shape(xi, eta)
            m += _GW[a] * _GW[b] * w * h * np.outer(n, n)
    return m


class DofHandler:
    """Vertex dofs of one tessellation level of a mesh.

    ``level=None`` addresses the leaf tessellation; smaller levels address
    the truncated trees that form the geometric multigrid hierarchy.

    Attributes
    ----------
    n_dofs : int
        Total vertex dofs N of the tessellation, before any constraint
        elimination (Dirichlet and hanging dofs included).
    cell_ids : array
        Global cell ids of the tessellation, ascending.
    cell_dofs : (n_cells, 4) array
        Dof indices of each cell's corners in SW, SE, NE, NW order.
    dof_to_vertex, vertex_to_dof : arrays
        Maps between dof indices and global mesh vertex ids.
    """

    def __init__(self, mesh: Mesh, level: int | None = None):
        self.mesh = mesh
        self.level = mesh.level_count - 1 if level is None else level
        self.cell_ids = mesh.cells_at(self.level)
        used = np.zeros(mesh.n_vertices, dtype=bool)
        used[mesh.cell_vertices[self.cell_ids]] = True
        verts = np.flatnonzero(used)
        order = np.lexsort((verts, mesh.vertex_y[verts], mesh.vertex_x[verts]))
        self.dof_to_vertex = verts[order]
        self.vertex_to_dof = np.full(mesh.n_vertices, -1, dtype=np.int64)
        self.vertex_to_dof[self.dof_to_vertex] = np.arange(verts.size)
        self.cell_dofs = self.vertex_to_dof[mesh.cell_vertices[self.cell_ids]]
        self.n_dofs = int(verts.size)

    @property
    def n_cells(self) -> int:
        return self.cell_ids.size

    def dof_points(self):
        """Coordinates (x, y) of every dof."""
        return (self.mesh.vertex_x[self.dof_to_vertex],
                self.mesh.vertex_y[self.dof_to_vertex])


def distribute_dofs(mesh: Mesh, level: int | None = None) -> DofHandler:
    """Number the vertex dofs of a tessellation level of ``mesh``."""
    return DofHandler(mesh, level)


class ConstraintSet:
    """Dirichlet and hanging-node constraints of a :class:`DofHandler`.

    ``expand`` maps free-dof vectors to conforming full nodal vectors
    (hanging values averaged from their masters, Dirichlet values zero);
    ``reduce`` selects the free entries.  ``matrix`` is the sparse
    condensation operator C with ``expand(x) = C @ x``; the condensed
    operators are ``C.T @ A_full @ C``.
    """

    def __init__(self, dh: DofHandler):
        self.dh = dh
        topo = dh.mesh.level_topology(dh.level)
        n = dh.n_dofs
        self.dirichlet = np.zeros(n, dtype=bool)
        self.dirichlet[dh.vertex_to_dof[topo.boundary_vertices]] = True
        self.hanging_dofs = dh.vertex_to_dof[topo.hanging_vertex]
        self.hanging_masters = dh.vertex_to_dof[topo.hanging_masters]
        hanging_mask = np.zeros(n, dtype=bool)
        hanging_mask[self.hanging_dofs] = True
        if self.hanging_masters.size:
            # 1-irregularity guarantees masters are regular vertices (no chains)
            assert not np.any(hanging_mask[self.hanging_masters.ravel()])
        self.free_mask = ~(self.dirichlet | hanging_mask)
        self.dof_of_free = np.flatnonzero(self.free_mask)
        self.free_of_dof = np.full(n, -1, dtype=np.int64)
        self.free_of_dof[self.dof_of_free] = np.arange(self.dof_of_free.size)
        self.n_free = int(self.dof_of_free.size)

        rows = [self.dof_of_free]
        cols = [np.arange(self.n_free)]
        data = [np.ones(self.n_free)]
        for k in range(2):
            m = self.hanging_masters[:, k] if self.hanging_masters.size else \
                np.empty(0, dtype=np.int64)
            fm = self.free_of_dof[m]
            ok = fm >= 0  # Dirichlet masters contribute a zero value
            rows.append(self.hanging_dofs[ok])
            cols.append(fm[ok])
            data.append(np.full(int(ok.sum()), 0.5))
        self.matrix = sp.csr_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, self.n_free),
        )

    @property
    def n_dirichlet(self) -> int:
        return int(self.dirichlet.sum())

    @property
    def n_hanging(self) -> int:
        return int(self.hanging_dofs.size)

    def expand(self, x: np.ndarray) -> np.ndarray:
        """Free-dof vector (or block) -> conforming full nodal vector."""
        return self.matrix @ x

    def reduce(self, v: np.ndarray) -> np.ndarray:
        """Full nodal vector (or block) -> free entries."""
        return v[self.dof_of_free]

    def constraint_residual(self, v: np.ndarray) -> float:
        """Max violation of the hanging-node constraints by a nodal vector."""
        if self.hanging_dofs.size == 0:
            return 0.0
        mean = 0.5 * (v[self.hanging_masters[:, 0]] + v[self.hanging_masters[:, 1]])
        return float(np.max(np.abs(v[self.hanging_dofs] - mean)))


def build_constraints(dh: DofHandler) -> ConstraintSet:
    """Collect Dirichlet and hanging-node constraints for a dof handler."""
    return ConstraintSet(dh)


def _element_structure(dh: DofHandler):
    """Shared assembly structure: triplet positions and cell size classes."""
    _, _, w, h = dh.mesh.cell_boxes(dh.cell_ids)
    # cells share an element matrix iff they share (w, h); a complex key
    # makes this a cheap 1-D grouping
    sizes, ginv = np.unique(w + 1j * h, return_inverse=True)
    cd = dh.cell_dofs
    rows = np.repeat(cd, 4, axis=1).ravel()
    cols = np.tile(cd, (1, 4)).ravel()
    return sizes, ginv, rows, cols


def _condense(full: sp.coo_matrix, cs: ConstraintSet) -> sp.csr_matrix:
    c = cs.matrix
    red = (c.T @ full.tocsr() @ c).tocsr()
    red = (red + red.T) * 0.5  # enforce exact symmetry of the condensed operator
    red.sum_duplicates()
    return red


def _element_data(sizes, ginv, local) -> np.ndarray:
    kmats = np.stack([local(float(s.real), float(s.imag)).ravel() for s in sizes])
    return kmats[ginv].ravel()


def _assemble(dh: DofHandler, cs: ConstraintSet, local) -> sp.csr_matrix:
    sizes, ginv, rows, cols = _element_structure(dh)
    n = dh.n_dofs
    full = sp.coo_matrix((_element_data(sizes, ginv, local), (rows, cols)),
                         shape=(n, n))
    return _condense(full, cs)


def assemble_stiffness(dh: DofHandler, cs: ConstraintSet) -> sp.csr_matrix:
    """Condensed stiffness matrix over the free dofs (SPD)."""
    if cs.n_free == 0:
        raise ValueError("no free dofs: the tessellation has no interior vertices")
    return _assemble(dh, cs, local_stiffness)


def assemble_mass(dh: DofHandler, cs: ConstraintSet) -> sp.csr_matrix:
    """Condensed consistent mass matrix over the free dofs (SPD)."""
    if cs.n_free == 0:
        raise ValueError("no free dofs: the tessellation has no interior vertices")
    return _assemble(dh, cs, local_mass)


def assemble_operators(dh: DofHandler, cs: ConstraintSet):
    """Condensed (stiffness, mass) pair sharing one assembly structure.

    Equivalent to calling :func:`assemble_stiffness` and
    :func:`assemble_mass` but computes the cell grouping and triplet
    positions once.
    """
    if cs.n_free == 0:
        raise ValueError("no free dofs: the tessellation has no interior vertices")
    sizes, ginv, rows, cols = _element_structure(dh)
    n = dh.n_dofs
    out = []
    for local in (local_stiffness, local_mass):
        full = sp.coo_matrix((_element_data(sizes, ginv, local), (rows, cols)),
                             shape=(n, n))
        out.append(_condense(full, cs))
    return tuple(out)


def prolongation(coarse: DofHandler, fine: DofHandler) -> sp.csr_matrix:
    """Nodal injection matrix from a coarse into a fine tessellation.

    The fine tessellation must refine the coarse one (either the truncations
    of one mesh at consecutive levels, or the meshes before and after one
    :func:`sapinvit.mesh.refine` call).  Row ``i`` holds the coarse nodal
    evaluation weights at fine vertex ``i``: 1 on a shared vertex, 1/2 on
    the parents of an edge midpoint, 1/4 on the corners around a cell
    center.  Applied to a conforming coarse vector it returns the conforming
    fine nodal interpolant of the same function.
    """
    fmesh = fine.mesh
    fverts = fine.dof_to_vertex
    nc_verts = coarse.vertex_to_dof.size
    cdof = np.full(fverts.size, -1, dtype=np.int64)
    known = fverts < nc_verts
    cdof[known] = coarse.vertex_to_dof[fverts[known]]
    shared = cdof >= 0
    rows = [np.flatnonzero(shared)]
    cols = [cdof[shared]]
    data = [np.ones(int(shared.sum()))]
    new = np.flatnonzero(~shared)
    kind = fmesh._vkind[fverts[new]]
    for k, nw, weight in ((_ORIGIN_EDGE_MID, 2, 0.5), (_ORIGIN_CENTER, 4, 0.25)):
        idx = new[kind == k]
        par = fmesh._vorigin[fverts[idx], :nw]
        pdof = np.where(par < nc_verts, coarse.vertex_to_dof[np.clip(par, 0, nc_verts - 1)], -1)
        if np.any(pdof < 0):
            raise ValueError("fine mesh is not a refinement of the coarse mesh")
        rows.append(np.repeat(idx, nw))
        cols.append(pdof.ravel())
        data.append(np.full(idx.size * nw, weight))
    if np.any((kind != _ORIGIN_EDGE_MID) & (kind != _ORIGIN_CENTER)):
        raise ValueError("fine mesh is not a refinement of the coarse mesh")
    return sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(fine.n_dofs, coarse.n_dofs),
    )


def reduced_transfer(coarse_cs: ConstraintSet, fine_cs: ConstraintSet,
                     p_nodal: sp.csr_matrix) -> sp.csr_matrix:
    """Free-dof transfer: expand on the coarse level, inject, select free rows.

    Energy is preserved exactly: with condensed stiffness matrices A_c, A_f
    and P = reduced_transfer(...), ``P.T @ A_f @ P == A_c`` holds up to
    roundoff because the coarse space is a subspace of the fine one.
    """
    return (p_nodal @ coarse_cs.matrix).tocsr()[fine_cs.dof_of_free]


def fe_value_and_gradient(dh: DofHandler, vec: np.ndarray, cell_id: int,
                          xi: float, eta: float):
    """Evaluate a nodal field and its gradient inside one cell.

    Parameters
    ----------
    dh : DofHandler
    vec : array of length ``dh.n_dofs``
        Full nodal coefficient vector.
    cell_id : int
        Global id of a cell of the handler's tessellation.
    xi, eta : float
        Local coordinates in the reference square [0, 1]^2.
    """
    if not (0.0 <= xi <= 1.0 and 0.0 <= eta <= 1.0):
        raise ValueError(f"local point ({xi}, {eta}) outside the reference cell")
    if vec.shape[0] != dh.n_dofs:
        raise ValueError("coefficient vector length does not match the dof count")
    row = np.searchsorted(dh.cell_ids, cell_id)
    if row >= dh.cell_ids.size or dh.cell_ids[row] != cell_id:
        raise ValueError(f"cell {cell_id} is not part of this tessellation")
    dofs = dh.cell_dofs[row]
    _, _, w, h = dh.mesh.cell_boxes(np.array([cell_id]))
    vals = vec[dofs]
    value = float(_shape(xi, eta) @ vals)
    g = _shape_grad(xi, eta)
    gx = float(g[:, 0] @ vals) / float(w[0])
    gy = float(g[:, 1] @ vals) / float(h[0])
    return value, (gx, gy)


def build_gmg_hierarchy(mesh: Mesh, *, coarse_threshold: int = 512,
                        finest=None) -> linalg.GmgHierarchy:
    """Assemble the per-level operators and transfers for geometric multigrid.

    Every tessellation level of ``mesh`` (from the coarsest with at least one
    free dof up to the leaves) contributes its condensed stiffness matrix;
    consecutive levels are linked by free-dof transfer operators.  Levels
    with at most ``coarse_threshold`` free dofs are merged into the direct
    coarse solve, so the returned hierarchy starts at the deepest level that
    is still small enough to factorize cheaply.

    Parameters
    ----------
    mesh : Mesh
    coarse_threshold : int
        Largest size solved directly at the bottom of the v-cycle.
    finest : tuple, optional
        ``(dh, cs, A)`` of the leaf level, if already assembled.

    Returns
    -------
    linalg.GmgHierarchy
    """
    top = mesh.level_count - 1
    if finest is None:
        dh = distribute_dofs(mesh, top)
        cs = build_constraints(dh)
        finest = (dh, cs, assemble_stiffness(dh, cs))
    handlers = {top: finest}
    sizes = [finest[1].n_free]
    levels = [top]
    for l in range(top - 1, -1, -1):
        dh = distribute_dofs(mesh, l)
        cs = build_constraints(dh)
        if cs.n_free == 0:
            break
        handlers[l] = (dh, cs, None)
        levels.append(l)
        sizes.append(cs.n_free)
        if cs.n_free <= coarse_threshold:
            break
    levels.reverse()
    sizes.reverse()
    # drop leading levels already below the direct-solve threshold, keeping one
    first = 0
    while first < len(levels) - 1 and sizes[first + 1] <= coarse_threshold:
        first += 1
    levels = levels[first:]
    transfers = []
    for lc, lf in zip(levels[:-1], levels[1:]):
        transfers.append(reduced_transfer(
            handlers[lc][1], handlers[lf][1],
            prolongation(handlers[lc][0], handlers[lf][0])))
    # coarse operators by Galerkin restriction of the finest one; on nested
    # levels this equals direct assembly (up to roundoff) at a fraction of
    # the cost, and makes the two-level consistency exact by construction
    mats = [None] * len(levels)
    mats[-1] = handlers[levels[-1]][2]
    for i in range(len(levels) - 2, -1, -1):
        p = transfers[i]
        b = sp.csr_matrix(p.T @ (mats[i + 1] @ p))
        mats[i] = (b + b.T) * 0.5
    return linalg.GmgHierarchy(mats, transfers)


def extend_gmg_hierarchy(hierarchy: linalg.GmgHierarchy, fine_matrix,
                         transfer, *, growth: float = 3.5) -> linalg.GmgHierarchy:
    """Grow a hierarchy by one refinement step of its finest level.

    ``transfer`` is the free-dof transfer from the hierarchy's current
    finest level into the new one (see :func:`reduced_transfer`), and
    ``fine_matrix`` the condensed operator there.  The old levels are kept
    as they are — their spaces remain nested in the new leaf space — so the
    update costs one transfer instead of a full rebuild.  When the new leaf
    is less than ``growth`` times larger than the level below the current
    top, the top is replaced (transfers are composed) instead of appended,
    keeping the level sizes geometrically spaced and the v-cycle cost
    proportional to the finest level.
    """
    mats = list(hierarchy.matrices)
    trs = list(hierarchy.transfers)
    if transfer.shape != (fine_matrix.shape[0], mats[-1].shape[0]):
        raise ValueError(
            f"transfer shape {transfer.shape} does not link the current top "
            f"({mats[-1].shape[0]}) to the new level ({fine_matrix.shape[0]})")
    if len(mats) >= 2 and fine_matrix.shape[0] < growth * mats[-2].shape[0]:
        trs[-1] = sp.csr_matrix(transfer @ trs[-1])
        mats[-1] = fine_matrix
    else:
        trs.append(transfer)
        mats.append(fine_matrix)
    out = linalg.GmgHierarchy(mats, trs)
    if out.matrices[0] is hierarchy.matrices[0]:
        out._coarse_factor = hierarchy._coarse_factor
    return out


def dump_matrix(path, a: sp.spmatrix) -> None:
    """Write a sparse matrix in MatrixMarket coordinate format."""
    scipy.io.mmwrite(path, sp.coo_matrix(a))
