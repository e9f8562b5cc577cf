"""Hierarchical quadrilateral meshes with quadtree refinement and hanging nodes.

A mesh starts from a conforming coarse tessellation of one of the benchmark
domains (unit square, L-shape, dumbbell) into axis-aligned rectangles.  Local
refinement quadrisects flagged cells; a closure sweep keeps the mesh
1-irregular, i.e. across any edge the levels of adjacent leaf cells differ by
at most one, so each coarse edge carries at most one hanging vertex.

The full refinement tree is stored, which gives two views of one object:

* the leaf (finest) tessellation used for the discrete eigenvalue problem,
* the truncation at any level ``l`` (every branch cut at depth ``l``), which
  supplies the nested space hierarchy for geometric multigrid.

Cells are stored struct-of-arrays so that neighbor search, refinement closure
and edge/constraint extraction are vectorized numpy passes; this keeps meshes
with a few hundred thousand cells practical.

Local conventions used throughout the package:

* corner order of a cell: 0=SW, 1=SE, 2=NE, 3=NW (counter-clockwise),
* side order: 0=S, 1=E, 2=N, 3=W; side ``s`` joins corners ``s`` and
  ``(s+1) % 4``,
* child order after quadrisection: 0=SW, 1=SE, 2=NE, 3=NW.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

__all__ = [
    "Point2",
    "Cell",
    "Edge",
    "EdgeSet",
    "Mesh",
    "make_grid",
    "refine",
    "uniform_refine",
    "active_edges",
    "write_vtk",
]

DOMAINS = ("unit_square", "lshape", "dumbbell")

# side s joins corners SIDE_CORNERS[s] = (s, (s+1) % 4)
_SIDE_CORNERS = ((0, 1), (1, 2), (2, 3), (3, 0))

# _SIBLING[pos, side] = child index of the same parent adjacent to child `pos`
# across `side`, or -1 when the side leaves the parent.
_SIBLING = np.array(
    [
        [-1, 1, 3, -1],  # SW: E -> SE, N -> NW
        [-1, -1, 2, 0],  # SE: N -> NE, W -> SW
        [1, -1, -1, 3],  # NE: S -> SE, W -> NW
        [0, 2, -1, -1],  # NW: S -> SW, E -> NE
    ],
    dtype=np.int8,
)

# _MIRROR[side, pos] = child index of the parent's neighbor across `side`
# that shares the half-edge with child `pos` (only exterior pos/side pairs
# are ever read).
_MIRROR = np.array(
    [
        [3, 2, -1, -1],  # S: SW -> NW, SE -> NE
        [-1, 0, 3, -1],  # E: SE -> SW, NE -> NW
        [-1, -1, 1, 0],  # N: NE -> SE, NW -> SW
        [1, -1, -1, 2],  # W: SW -> SE, NW -> NE
    ],
    dtype=np.int8,
)

# vertex origin kinds
_ORIGIN_BASE = 0
_ORIGIN_EDGE_MID = 1
_ORIGIN_CENTER = 2


class Point2(NamedTuple):
    """A point in the plane."""

    x: float
    y: float


@dataclass(frozen=True)
class Cell:
    """Read-only view of one cell of the refinement tree."""

    id: int
    level: int
    vertices: tuple[int, int, int, int]
    parent: int | None
    children: tuple[int, int, int, int] | None

    @property
    def active(self) -> bool:
        return self.children is None


@dataclass(frozen=True)
class Edge:
    """One edge record produced by :func:`active_edges`.

    ``cells`` holds the adjacent cell ids; boundary edges carry exactly one.
    At a coarse-fine interface the coarse edge is reported as two half-edges
    whose endpoints match the fine side, so ``length`` is always the length
    of the finer of the two touching cell sides.
    """

    id: int
    endpoints: tuple[int, int]
    cells: tuple[int, ...]
    boundary: bool
    length: float


class EdgeSet:
    """Edges of one tessellation (a level view of a :class:`Mesh`).

    Interior and boundary edges are kept as parallel numpy arrays; use
    :meth:`interior_records` / :meth:`boundary_records` for object views.

    Attributes
    ----------
    va, vb : int arrays
        Endpoint vertex ids of each interior edge (fine-side granularity).
    cell_in, cell_out : int arrays
        Adjacent cell ids; ``cell_in`` is the emitting side (the finer cell
        at a coarse-fine interface).
    is_half : bool array
        True where the edge is the half of a longer coarse edge.
    axis : int array
        0 for vertical edges (normal along x), 1 for horizontal edges.
    length : float array
        Edge lengths.
    bva, bvb, bcell, baxis, blength : arrays
        The same data for boundary edges (one adjacent cell each).
    """

    def __init__(self, mesh: "Mesh", level: int, interior: dict, boundary: dict):
        self.mesh = mesh
        self.level = level
        self.va = interior["va"]
        self.vb = interior["vb"]
        self.cell_in = interior["cell_in"]
        self.cell_out = interior["cell_out"]
        self.is_half = interior["is_half"]
        self.axis = interior["axis"]
        self.length = interior["length"]
        self.bva = boundary["va"]
        self.bvb = boundary["vb"]
        self.bcell = boundary["cell"]
        self.baxis = boundary["axis"]
        self.blength = boundary["length"]

    @property
    def n_interior(self) -> int:
        return self.va.size

    @property
    def n_boundary(self) -> int:
        return self.bva.size

    def interior_records(self) -> Iterator[Edge]:
        for i in range(self.n_interior):
            yield Edge(
                id=i,
                endpoints=(int(self.va[i]), int(self.vb[i])),
                cells=(int(self.cell_in[i]), int(self.cell_out[i])),
                boundary=False,
                length=float(self.length[i]),
            )

    def boundary_records(self) -> Iterator[Edge]:
        for i in range(self.n_boundary):
            yield Edge(
                id=self.n_interior + i,
                endpoints=(int(self.bva[i]), int(self.bvb[i])),
                cells=(int(self.bcell[i]),),
                boundary=True,
                length=float(self.blength[i]),
            )


class _LevelTopology:
    """Cached per-level connectivity: edges, hanging nodes, boundary."""

    def __init__(self, members, edges, hanging_vertex, hanging_masters, boundary_vertices):
        self.members = members
        self.edges = edges
        self.hanging_vertex = hanging_vertex
        self.hanging_masters = hanging_masters
        self.boundary_vertices = boundary_vertices


class Mesh:
    """An immutable hierarchical quadrilateral mesh.

    Do not construct directly; use :func:`make_grid` and :func:`refine`.
    """

    def __init__(self, domain, vx, vy, vkind, vorigin, clevel, cverts, cparent,
                 cchildren, cchildpos, n_base):
        self.domain = domain
        self.vertex_x = vx
        self.vertex_y = vy
        self._vkind = vkind
        self._vorigin = vorigin
        self.cell_level = clevel
        self.cell_vertices = cverts
        self.cell_parent = cparent
        self.cell_children = cchildren
        self._childpos = cchildpos
        self._n_base = n_base
        for arr in (vx, vy, vkind, vorigin, clevel, cverts, cparent, cchildren, cchildpos):
            arr.setflags(write=False)
        self._neighbor = _compute_neighbors(clevel, cverts, cparent, cchildren,
                                            cchildpos, n_base)
        self._neighbor.setflags(write=False)
        self._topology_cache: dict[int, _LevelTopology] = {}

    # ------------------------------------------------------------------ sizes
    @property
    def n_vertices(self) -> int:
        return self.vertex_x.size

    @property
    def n_cells(self) -> int:
        return self.cell_level.size

    @property
    def level_count(self) -> int:
        """Number of levels in the hierarchy (= max cell level + 1)."""
        return int(self.cell_level.max()) + 1

    @property
    def n_active_cells(self) -> int:
        return int(np.count_nonzero(self.cell_children[:, 0] < 0))

    # ------------------------------------------------------------ cell access
    def active_cells(self) -> np.ndarray:
        """Ids of the leaf cells, ascending."""
        return np.flatnonzero(self.cell_children[:, 0] < 0)

    def cells_at(self, level: int | None = None) -> np.ndarray:
        """Cells of the tessellation obtained by cutting the tree at ``level``.

        ``level=None`` (or the maximum level) gives the leaf tessellation.
        """
        if level is None:
            level = self.level_count - 1
        if not 0 <= level < self.level_count:
            raise ValueError(f"level {level} outside [0, {self.level_count - 1}]")
        lev = self.cell_level
        active = self.cell_children[:, 0] < 0
        return np.flatnonzero((lev == level) | ((lev < level) & active))

    def cell(self, i: int) -> Cell:
        if not 0 <= i < self.n_cells:
            raise ValueError(f"no cell with id {i}")
        kids = self.cell_children[i]
        par = int(self.cell_parent[i])
        return Cell(
            id=i,
            level=int(self.cell_level[i]),
            vertices=tuple(int(v) for v in self.cell_vertices[i]),
            parent=None if par < 0 else par,
            children=None if kids[0] < 0 else tuple(int(k) for k in kids),
        )

    def vertex(self, i: int) -> Point2:
        return Point2(float(self.vertex_x[i]), float(self.vertex_y[i]))

    def cell_boxes(self, ids: np.ndarray):
        """Return ``(x0, y0, w, h)`` arrays for the given cells."""
        sw = self.cell_vertices[ids, 0]
        ne = self.cell_vertices[ids, 2]
        x0 = self.vertex_x[sw]
        y0 = self.vertex_y[sw]
        return x0, y0, self.vertex_x[ne] - x0, self.vertex_y[ne] - y0

    def areas(self, ids: np.ndarray | None = None) -> np.ndarray:
        if ids is None:
            ids = self.active_cells()
        _, _, w, h = self.cell_boxes(ids)
        return w * h

    @property
    def total_area(self) -> float:
        return float(self.areas().sum())

    # ------------------------------------------------------------- topology
    def level_topology(self, level: int | None = None) -> _LevelTopology:
        if level is None:
            level = self.level_count - 1
        if level not in self._topology_cache:
            self._topology_cache[level] = _build_topology(self, level)
        return self._topology_cache[level]

    # ------------------------------------------------------------ validation
    def check(self) -> None:
        """Assert the structural invariants; used by the test-suite."""
        lev = self.cell_level
        active = self.cell_children[:, 0] < 0
        # children partition their parent into 4 congruent sub-rectangles
        refined = np.flatnonzero(~active)
        for c in refined:
            kids = self.cell_children[c]
            assert np.all(lev[kids] == lev[c] + 1)
            assert np.all(self.cell_parent[kids] == c)
            x0, y0, w, h = self.cell_boxes(np.array([c]))
            kx0, ky0, kw, kh = self.cell_boxes(kids)
            assert np.allclose(kw, w / 2) and np.allclose(kh, h / 2)
            assert np.isclose((kw * kh).sum(), (w * h)[0])
        # 1-irregularity across every leaf edge + hanging vertices at midpoints
        for l in range(self.level_count):
            topo = self.level_topology(l)
            ein = topo.edges
            la = lev[ein.cell_in]
            lb = lev[ein.cell_out]
            assert np.all(np.abs(la - lb) <= 1)
            assert np.all(la[ein.is_half] == lb[ein.is_half] + 1)
            hv = topo.hanging_vertex
            if hv.size:
                mx = 0.5 * (self.vertex_x[topo.hanging_masters].sum(axis=1))
                my = 0.5 * (self.vertex_y[topo.hanging_masters].sum(axis=1))
                assert np.allclose(self.vertex_x[hv], mx) and np.allclose(self.vertex_y[hv], my)


# --------------------------------------------------------------------------
# neighbor computation
# --------------------------------------------------------------------------
def _compute_neighbors(clevel, cverts, cparent, cchildren, cchildpos, n_base):
    """Same-or-coarser edge neighbor of every cell on each side (-1 = boundary).

    Base-level adjacency comes from matching shared vertex pairs (the coarse
    tessellations are conforming); deeper levels inherit it through the tree,
    one vectorized pass per level.
    """
    nc = clevel.size
    nbr = np.full((nc, 4), -1, dtype=np.int64)
    edge_map: dict[tuple[int, int], tuple[int, int]] = {}
    for c in range(n_base):
        for s, (i, j) in enumerate(_SIDE_CORNERS):
            a, b = int(cverts[c, i]), int(cverts[c, j])
            key = (a, b) if a < b else (b, a)
            other = edge_map.pop(key, None)
            if other is None:
                edge_map[key] = (c, s)
            else:
                c2, s2 = other
                nbr[c, s] = c2
                nbr[c2, s2] = c
    if nc == n_base:
        return nbr
    max_level = int(clevel.max())
    for l in range(1, max_level + 1):
        ids = np.flatnonzero(clevel == l)
        if ids.size == 0:
            continue
        par = cparent[ids]
        pos = cchildpos[ids].astype(np.int64)
        for s in range(4):
            res = np.empty(ids.size, dtype=np.int64)
            sib = _SIBLING[pos, s].astype(np.int64)
            internal = sib >= 0
            res[internal] = cchildren[par[internal], sib[internal]]
            ext = ~internal
            pn = nbr[par[ext], s]
            out = pn.copy()
            pn_ok = pn >= 0
            pnc = np.where(pn_ok, pn, 0)
            has_kids = pn_ok & (cchildren[pnc, 0] >= 0)
            mir = _MIRROR[s, pos[ext]].astype(np.int64)
            out[has_kids] = cchildren[pnc[has_kids], mir[has_kids]]
            res[ext] = out
            nbr[ids, s] = res
    return nbr


# --------------------------------------------------------------------------
# per-level topology (edges, hanging nodes, boundary)
# --------------------------------------------------------------------------
def _build_topology(mesh: Mesh, level: int) -> _LevelTopology:
    members = mesh.cells_at(level)
    nc = mesh.n_cells
    lev = mesh.cell_level
    is_member = np.zeros(nc, dtype=bool)
    is_member[members] = True

    c4 = mesh.cell_vertices[members]
    lev_m = lev[members]
    nbr_m = mesh._neighbor[members]

    int_va, int_vb, int_cin, int_cout = [], [], [], []
    int_half, int_axis, int_len = [], [], []
    b_va, b_vb, b_cell, b_axis, b_len = [], [], [], [], []
    half_nb, half_side, half_pa, half_pb = [], [], [], []

    vx, vy = mesh.vertex_x, mesh.vertex_y
    for s, (i, j) in enumerate(_SIDE_CORNERS):
        pa = c4[:, i]
        pb = c4[:, j]
        nb = nbr_m[:, s]
        seg = np.abs(vx[pb] - vx[pa]) + np.abs(vy[pb] - vy[pa])
        axis = 0 if s in (1, 3) else 1  # E/W sides are vertical edges

        on_boundary = nb < 0
        if np.any(on_boundary):
            b_va.append(pa[on_boundary])
            b_vb.append(pb[on_boundary])
            b_cell.append(members[on_boundary])
            b_axis.append(np.full(int(on_boundary.sum()), axis, dtype=np.int8))
            b_len.append(seg[on_boundary])

        nbc = np.where(on_boundary, 0, nb)
        memb = is_member[nbc] & ~on_boundary
        same = memb & (lev[nbc] == lev_m)
        emit_same = same & (members < nb)
        emit_half = memb & (lev[nbc] < lev_m)
        for mask, half in ((emit_same, False), (emit_half, True)):
            if not np.any(mask):
                continue
            int_va.append(pa[mask])
            int_vb.append(pb[mask])
            int_cin.append(members[mask])
            int_cout.append(nb[mask])
            k = int(mask.sum())
            int_half.append(np.full(k, half))
            int_axis.append(np.full(k, axis, dtype=np.int8))
            int_len.append(seg[mask])
        if np.any(emit_half):
            half_nb.append(nb[emit_half])
            half_side.append(np.full(int(emit_half.sum()), s, dtype=np.int8))
            half_pa.append(pa[emit_half])
            half_pb.append(pb[emit_half])

    def _cat(parts, dtype=np.int64):
        return np.concatenate(parts) if parts else np.empty(0, dtype=dtype)

    interior = {
        "va": _cat(int_va), "vb": _cat(int_vb),
        "cell_in": _cat(int_cin), "cell_out": _cat(int_cout),
        "is_half": _cat(int_half, bool), "axis": _cat(int_axis, np.int8),
        "length": _cat(int_len, float),
    }
    boundary = {
        "va": _cat(b_va), "vb": _cat(b_vb), "cell": _cat(b_cell),
        "axis": _cat(b_axis, np.int8), "length": _cat(b_len, float),
    }
    edges = EdgeSet(mesh, level, interior, boundary)

    # hanging vertices: on each half-edge the fine corner that is not a corner
    # of the coarse neighbor sits at the midpoint of the coarse edge; its
    # masters are the coarse edge endpoints.
    if half_nb:
        hnb = np.concatenate(half_nb)
        hs = np.concatenate(half_side).astype(np.int64)
        hpa = np.concatenate(half_pa)
        hpb = np.concatenate(half_pb)
        nbv = mesh.cell_vertices[hnb]
        pa_is_corner = (nbv == hpa[:, None]).any(axis=1)
        hang = np.where(pa_is_corner, hpb, hpa)
        opp = (hs + 2) % 4
        ma = nbv[np.arange(hnb.size), opp]
        mb = nbv[np.arange(hnb.size), (opp + 1) % 4]
        hang, first = np.unique(hang, return_index=True)
        masters = np.stack([ma[first], mb[first]], axis=1)
    else:
        hang = np.empty(0, dtype=np.int64)
        masters = np.empty((0, 2), dtype=np.int64)

    bverts = np.unique(np.concatenate([boundary["va"], boundary["vb"]])) \
        if boundary["va"].size else np.empty(0, dtype=np.int64)
    return _LevelTopology(members, edges, hang, masters, bverts)


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------
def _mesh_from_cells(domain: str, points: list[tuple[float, float]],
                     quads: list[tuple[int, int, int, int]]) -> Mesh:
    n = len(points)
    vx = np.array([p[0] for p in points], dtype=float)
    vy = np.array([p[1] for p in points], dtype=float)
    vkind = np.full(n, _ORIGIN_BASE, dtype=np.int8)
    vorigin = np.full((n, 4), -1, dtype=np.int64)
    m = len(quads)
    cverts = np.array(quads, dtype=np.int64).reshape(m, 4)
    return Mesh(
        domain=domain,
        vx=vx, vy=vy, vkind=vkind, vorigin=vorigin,
        clevel=np.zeros(m, dtype=np.int64),
        cverts=cverts,
        cparent=np.full(m, -1, dtype=np.int64),
        cchildren=np.full((m, 4), -1, dtype=np.int64),
        cchildpos=np.full(m, -1, dtype=np.int8),
        n_base=m,
    )


def _tensor_cells(xs, ys, points, index):
    """Append the tensor grid xs x ys to a shared vertex dict; return quads."""
    ids = {}
    for yv in ys:
        for xv in xs:
            key = (xv, yv)
            if key not in index:
                index[key] = len(points)
                points.append(key)
            ids[key] = index[key]
    quads = []
    for j in range(len(ys) - 1):
        for i in range(len(xs) - 1):
            quads.append((
                ids[(xs[i], ys[j])],
                ids[(xs[i + 1], ys[j])],
                ids[(xs[i + 1], ys[j + 1])],
                ids[(xs[i], ys[j + 1])],
            ))
    return quads


def make_grid(domain: str, *, bridge_width: float = 0.1,
              bridge_length: float = 0.25) -> Mesh:
    """Build the coarse mesh of a benchmark domain.

    Parameters
    ----------
    domain : str
        One of ``unit_square`` (one cell on [0,1]^2), ``lshape``
        ([-1,1]^2 minus the fourth quadrant, three unit cells) or
        ``dumbbell`` (two unit squares joined by a thin bridge).
    bridge_width, bridge_length : float
        Dumbbell geometry: the bridge is centered vertically with the given
        width and connects the squares over the given length.

    Returns
    -------
    Mesh
    """
    if domain == "unit_square":
        pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
        return _mesh_from_cells(domain, pts, [(0, 1, 2, 3)])
    if domain == "lshape":
        pts = [(-1.0, -1.0), (0.0, -1.0), (-1.0, 0.0), (0.0, 0.0), (1.0, 0.0),
               (-1.0, 1.0), (0.0, 1.0), (1.0, 1.0)]
        quads = [(0, 1, 3, 2), (2, 3, 6, 5), (3, 4, 7, 6)]
        return _mesh_from_cells(domain, pts, quads)
    if domain == "dumbbell":
        if not 0.0 < bridge_width < 1.0:
            raise ValueError(f"bridge width {bridge_width} outside (0, 1)")
        if bridge_length <= 0.0:
            raise ValueError(f"bridge length {bridge_length} must be positive")
        y0 = 0.5 - 0.5 * bridge_width
        y1 = 0.5 + 0.5 * bridge_width
        xl = 1.0 + bridge_length
        points: list[tuple[float, float]] = []
        index: dict[tuple[float, float], int] = {}
        ys = (0.0, y0, y1, 1.0)
        quads = _tensor_cells((0.0, 0.5, 1.0), ys, points, index)
        quads += _tensor_cells((xl, xl + 0.5, xl + 1.0), ys, points, index)
        quads += _tensor_cells((1.0, xl), (y0, y1), points, index)
        return _mesh_from_cells(domain, points, quads)
    raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}")


# --------------------------------------------------------------------------
# refinement
# --------------------------------------------------------------------------
def refine(mesh: Mesh, flags) -> Mesh:
    """Quadrisect the flagged leaf cells, closing to keep 1-irregularity.

    Parameters
    ----------
    mesh : Mesh
    flags : iterable of int
        Ids of leaf cells to refine.  An empty set returns an identical mesh.

    Returns
    -------
    Mesh
        A new mesh; the input is untouched.  Extra cells beyond the flagged
        ones are split only as needed so that adjacent leaf levels never
        differ by more than one.
    """
    flag_ids = np.unique(np.asarray(list(flags), dtype=np.int64))
    if flag_ids.size == 0:
        return Mesh(mesh.domain, mesh.vertex_x, mesh.vertex_y, mesh._vkind,
                    mesh._vorigin, mesh.cell_level, mesh.cell_vertices,
                    mesh.cell_parent, mesh.cell_children, mesh._childpos,
                    mesh._n_base)
    if flag_ids[0] < 0 or flag_ids[-1] >= mesh.n_cells:
        raise ValueError("flagged cell id out of range")
    active = mesh.cell_children[:, 0] < 0
    if not np.all(active[flag_ids]):
        raise ValueError("flagged cell is not an active (leaf) cell")

    lev = mesh.cell_level
    nbr = mesh._neighbor
    split = np.zeros(mesh.n_cells, dtype=bool)
    split[flag_ids] = True
    frontier = flag_ids
    # closure: a coarser active neighbor of a cell about to be split must be
    # split as well; iterate to the fixed point (levels strictly decrease).
    while frontier.size:
        nb = nbr[frontier]
        own = np.repeat(lev[frontier], 4)
        nb = nb.ravel()
        ok = nb >= 0
        nb = nb[ok]
        own = own[ok]
        need = active[nb] & (lev[nb] < own)
        cand = np.unique(nb[need])
        frontier = cand[~split[cand]]
        split[frontier] = True
    split_ids = np.flatnonzero(split)

    vx, vy = mesh.vertex_x, mesh.vertex_y
    n_old = vx.size
    k = split_ids.size
    cv = mesh.cell_vertices[split_ids]
    # side midpoints (S, E, N, W) of every split cell; packing the pair of
    # coordinates into one complex number gives exact float dedup keys
    ea = cv[:, (0, 1, 2, 3)].ravel()
    eb = cv[:, (1, 2, 3, 0)].ravel()
    mkey = (vx[ea] + vx[eb]) / 2.0 + 1j * ((vy[ea] + vy[eb]) / 2.0)
    # only existing edge-midpoint vertices can collide with new midpoints
    pool_ids = np.flatnonzero(mesh._vkind == _ORIGIN_EDGE_MID)
    pool_key = vx[pool_ids] + 1j * vy[pool_ids]
    porder = np.argsort(pool_key)
    psort = pool_key[porder]
    mid = np.empty(ea.size, dtype=np.int64)
    if psort.size:
        pos = np.minimum(np.searchsorted(psort, mkey), psort.size - 1)
        hit = psort[pos] == mkey
        mid[hit] = pool_ids[porder[pos[hit]]]
    else:
        hit = np.zeros(ea.size, dtype=bool)
    miss = np.flatnonzero(~hit)
    uniq, first, inverse = np.unique(mkey[miss], return_index=True,
                                     return_inverse=True)
    # number fresh midpoints in order of first appearance
    rank = np.empty(uniq.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(uniq.size)
    mid[miss] = n_old + rank[inverse]
    mid_x = np.empty(uniq.size)
    mid_y = np.empty(uniq.size)
    mid_ab = np.full((uniq.size, 4), -1, dtype=np.int64)
    mid_x[rank] = uniq.real
    mid_y[rank] = uniq.imag
    mid_ab[rank, 0] = ea[miss][first]
    mid_ab[rank, 1] = eb[miss][first]

    ctr = n_old + uniq.size + np.arange(k, dtype=np.int64)
    ctr_x = (vx[cv[:, 0]] + vx[cv[:, 2]]) / 2.0
    ctr_y = (vy[cv[:, 0]] + vy[cv[:, 2]]) / 2.0

    ms, me, mn, mw = mid.reshape(k, 4).T
    v0, v1, v2, v3 = cv.T
    quads = np.stack([
        np.column_stack((v0, ms, ctr, mw)),
        np.column_stack((ms, v1, me, ctr)),
        np.column_stack((ctr, me, v2, mn)),
        np.column_stack((mw, ctr, mn, v3)),
    ], axis=1).reshape(4 * k, 4)

    cchildren = mesh.cell_children.copy()
    child_ids = mesh.n_cells + np.arange(4 * k, dtype=np.int64)
    cchildren[split_ids] = child_ids.reshape(k, 4)

    n_new = uniq.size + k
    vkind_new = np.concatenate([
        np.full(uniq.size, _ORIGIN_EDGE_MID, dtype=np.int8),
        np.full(k, _ORIGIN_CENTER, dtype=np.int8)])
    vorigin_new = np.concatenate([mid_ab, cv])
    return Mesh(
        domain=mesh.domain,
        vx=np.concatenate([vx, mid_x, ctr_x]),
        vy=np.concatenate([vy, mid_y, ctr_y]),
        vkind=np.concatenate([mesh._vkind, vkind_new]),
        vorigin=np.concatenate([mesh._vorigin,
                                vorigin_new]).reshape(n_old + n_new, 4),
        clevel=np.concatenate([lev, np.repeat(lev[split_ids] + 1, 4)]),
        cverts=np.concatenate([mesh.cell_vertices, quads]),
        cparent=np.concatenate([mesh.cell_parent, np.repeat(split_ids, 4)]),
        cchildren=np.concatenate([cchildren,
                                  np.full((4 * k, 4), -1, dtype=np.int64)]),
        cchildpos=np.concatenate([mesh._childpos,
                                  np.tile(np.arange(4, dtype=np.int8), k)]),
        n_base=mesh._n_base,
    )


def uniform_refine(mesh: Mesh, times: int = 1) -> Mesh:
    """Refine every leaf cell ``times`` times."""
    for _ in range(times):
        mesh = refine(mesh, mesh.active_cells())
    return mesh


def active_edges(mesh: Mesh, level: int | None = None) -> EdgeSet:
    """Edges of the leaf tessellation (or of the truncation at ``level``).

    Interior edges pair exactly the two adjacent cells of the tessellation;
    at hanging interfaces the coarse edge appears as two half-edges whose
    endpoints match the fine side.  Boundary edges carry one cell each.
    """
    return mesh.level_topology(level).edges


# --------------------------------------------------------------------------
# VTK output
# --------------------------------------------------------------------------
def write_vtk(mesh: Mesh, path, level: int | None = None,
              cell_data: dict[str, np.ndarray] | None = None) -> None:
    """Write the tessellation as a legacy ASCII VTK unstructured grid.

    ``cell_data`` maps field names to per-cell scalar arrays aligned with
    ``mesh.cells_at(level)``.
    """
    members = mesh.cells_at(level)
    quads = mesh.cell_vertices[members]
    used = np.unique(quads)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    lines = [
        "# vtk DataFile Version 3.0",
        f"sapinvit {mesh.domain} mesh",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {used.size} double",
    ]
    xs = mesh.vertex_x[used]
    ys = mesh.vertex_y[used]
    lines.extend(f"{x:.17g} {y:.17g} 0" for x, y in zip(xs, ys))
    lines.append(f"CELLS {members.size} {members.size * 5}")
    rq = remap[quads]
    lines.extend(f"4 {a} {b} {c} {d}" for a, b, c, d in rq)
    lines.append(f"CELL_TYPES {members.size}")
    lines.extend("9" for _ in range(members.size))
    if cell_data:
        lines.append(f"CELL_DATA {members.size}")
        for name, values in cell_data.items():
            values = np.asarray(values, dtype=float)
            if values.size != members.size:
                raise ValueError(f"cell data {name!r} has {values.size} entries "
                                 f"for {members.size} cells")
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{v:.17g}" for v in values)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
