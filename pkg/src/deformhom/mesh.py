"""Structured quadrilateral meshes for the cross cell, the macro square and
the periodically perforated domain.

All meshes live on a tensor-product grid. Cells of the grid are either kept
(solid) or dropped (hole), so every element is an axis-aligned rectangle and
point location is a constant-time grid lookup.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import NotInDomainError

LOCATE_TOL = 1e-10


class BoundaryTag(IntEnum):
    OUTER_DIRICHLET = 0
    INNER_GAMMA = 1
    PERIODIC_FACE = 2


@dataclass(frozen=True)
class CrossCellGeometry:
    """Cross-shaped solid part of the unit cell.

    The vertical bar occupies ``((1-w1)/2, (1+w1)/2) x (0, 1)`` and the
    horizontal bar ``(0, 1) x ((1-w2)/2, (1+w2)/2)``.
    """

    w1: float
    w2: float

    def __post_init__(self):
        for name in ("w1", "w2"):
            w = getattr(self, name)
            if not (0.0 < w <= 1.0):
                raise ValueError(f"bar width {name}={w} outside (0, 1]")

    @property
    def solid_area(self) -> float:
        return self.w1 + self.w2 - self.w1 * self.w2

    def contains(self, y: np.ndarray) -> np.ndarray:
        """Open-set membership test for points of the unit square."""
        y = np.asarray(y, dtype=float)
        in1 = np.abs(y[..., 0] - 0.5) < self.w1 / 2
        in2 = np.abs(y[..., 1] - 0.5) < self.w2 / 2
        return in1 | in2

    def snapped(self, n_div: int) -> "CrossCellGeometry":
        k1, k2 = snap_offsets(self, n_div)
        return CrossCellGeometry(1.0 - 2.0 * k1 / n_div, 1.0 - 2.0 * k2 / n_div)


def snap_offsets(geom: CrossCellGeometry, n_div: int) -> tuple[int, int]:
    """Grid offsets ``k`` such that the snapped bar spans ``[k/n, 1 - k/n]``."""
    out = []
    for w in (geom.w1, geom.w2):
        k = int(round((1.0 - w) * n_div / 2.0))
        if n_div - 2 * k <= 0:
            raise ValueError(
                f"n_div={n_div} too coarse: bar of width {w} would contain no element row"
            )
        out.append(k)
    return out[0], out[1]


@dataclass(frozen=True)
class PointLocation:
    element: int
    local: np.ndarray


@dataclass(frozen=True, eq=False)
class StructuredQuadMesh:
    nodes: np.ndarray
    elements: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    periodic_pairs: np.ndarray
    h: float
    xs: np.ndarray
    ys: np.ndarray
    cell_index: np.ndarray
    geometry: CrossCellGeometry | None = None
    kind: str = "generic"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("nodes", "elements", "boundary_edges", "boundary_tags",
                     "periodic_pairs", "xs", "ys", "cell_index"):
            getattr(self, name).setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def element_origin(self) -> np.ndarray:
        return self.nodes[self.elements[:, 0]]

    @property
    def element_size(self) -> np.ndarray:
        return self.nodes[self.elements[:, 2]] - self.nodes[self.elements[:, 0]]

    @property
    def element_area(self) -> np.ndarray:
        s = self.element_size
        return s[:, 0] * s[:, 1]

    @property
    def area(self) -> float:
        return float(self.element_area.sum())

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.xs[-1] - self.xs[0], self.ys[-1] - self.ys[0]))

    def nodes_with_tag(self, tag: BoundaryTag) -> np.ndarray:
        edges = self.boundary_edges[self.boundary_tags == tag]
        return np.unique(edges.ravel())

    def map_to_physical(self, element, local) -> np.ndarray:
        element = np.asarray(element)
        local = np.asarray(local, dtype=float)
        return self.element_origin[element] + local * self.element_size[element]


def _grid_mesh(xs, ys, keep, *, outer_tag, periodic=False, geometry=None, kind="generic"):
    """Assemble a mesh from grid lines and a (ny, nx) mask of kept cells."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    ny, nx = keep.shape
    jj, ii = np.nonzero(keep)  # row-major: y outer, x inner
    cell_index = -np.ones((ny, nx), dtype=np.int64)
    cell_index[jj, ii] = np.arange(len(ii))

    corner_di = np.array([0, 1, 1, 0])
    corner_dj = np.array([0, 0, 1, 1])
    gi = ii[:, None] + corner_di
    gj = jj[:, None] + corner_dj
    used = np.zeros((ny + 1, nx + 1), dtype=bool)
    used[gj.ravel(), gi.ravel()] = True
    node_id = -np.ones((ny + 1, nx + 1), dtype=np.int64)
    uj, ui = np.nonzero(used)
    node_id[uj, ui] = np.arange(len(ui))
    nodes = np.column_stack([xs[ui], ys[uj]])
    elements = node_id[gj, gi]

    padded = np.zeros((ny + 2, nx + 2), dtype=bool)
    padded[1:-1, 1:-1] = keep
    # sides in ccw order: bottom, right, top, left
    neighbours = [(-1, 0), (0, 1), (1, 0), (0, -1)]
    side_nodes = [(0, 1), (1, 2), (2, 3), (3, 0)]
    edges, tags = [], []
    for (dj, di), (a, b) in zip(neighbours, side_nodes):
        open_side = ~padded[jj + 1 + dj, ii + 1 + di]
        sel = np.nonzero(open_side)[0]
        if len(sel) == 0:
            continue
        e = np.column_stack([elements[sel, a], elements[sel, b]])
        on_box = np.zeros(len(sel), dtype=bool)
        if dj == -1:
            on_box = jj[sel] == 0
        elif dj == 1:
            on_box = jj[sel] == ny - 1
        elif di == -1:
            on_box = ii[sel] == 0
        else:
            on_box = ii[sel] == nx - 1
        t = np.where(on_box, int(outer_tag), int(BoundaryTag.INNER_GAMMA))
        edges.append(e)
        tags.append(t)
    boundary_edges = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    boundary_tags = np.concatenate(tags) if tags else np.zeros(0, dtype=np.int64)

    pairs = np.zeros((0, 2), dtype=np.int64)
    if periodic:
        pairs = _periodic_pairs(node_id)

    h = float(max(np.max(np.diff(xs)), np.max(np.diff(ys))))
    return StructuredQuadMesh(
        nodes=nodes,
        elements=elements,
        boundary_edges=boundary_edges,
        boundary_tags=boundary_tags,
        periodic_pairs=pairs,
        h=h,
        xs=xs,
        ys=ys,
        cell_index=cell_index,
        geometry=geometry,
        kind=kind,
    )


def _periodic_pairs(node_id: np.ndarray) -> np.ndarray:
    """(master, slave) pairs identifying the right/top faces with left/bottom.

    Identifications are merged transitively, so the four corners of a full
    cell end up on one master (the smallest node id of each class).
    """
    ny1, nx1 = node_id.shape
    parent = {}

    def find(n):
        while parent.get(n, n) != n:
            n = parent[n]
        return n

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            lo, hi = min(ra, rb), max(ra, rb)
            parent[hi] = lo

    faces = [(node_id[:, 0], node_id[:, nx1 - 1], "y1"), (node_id[0, :], node_id[ny1 - 1, :], "y2")]
    for lo_face, hi_face, name in faces:
        if np.any((lo_face >= 0) != (hi_face >= 0)):
            raise ValueError(f"cell geometry is not periodic in {name}")
        for a, b in zip(lo_face, hi_face):
            if a >= 0:
                union(int(a), int(b))

    pairs = sorted((find(s), s) for s in list(parent) if find(s) != s)
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def _cross_mask(n: int, k1: int, k2: int, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
    """Membership of local cell indices (lx, ly) in the snapped cross."""
    in1 = (lx >= k1) & (lx < n - k1)
    in2 = (ly >= k2) & (ly < n - k2)
    return in1 | in2


def _fitted_lines(n_div: int, w: float) -> np.ndarray:
    lines = np.union1d(np.arange(n_div + 1) / n_div, [(1.0 - w) / 2.0, (1.0 + w) / 2.0])
    return lines[np.concatenate([[True], np.diff(lines) > 1e-9])]


def build_unit_cell_mesh(geom: CrossCellGeometry, n_div: int, fitted: bool = False) -> StructuredQuadMesh:
    """Mesh of the solid cross in the unit square with periodic pairings.

    By default the bar widths are snapped to the grid (multiples of
    ``1/n_div`` symmetric about 1/2) and the snapped geometry is stored on the
    mesh. With ``fitted=True`` the exact bar edges are inserted as extra grid
    lines instead, giving a non-uniform tensor grid that keeps thin bars and
    small holes.
    """
    if n_div < 4:
        raise ValueError("n_div must be at least 4")
    if fitted:
        xs, ys = _fitted_lines(n_div, geom.w1), _fitted_lines(n_div, geom.w2)
        cy, cx = 0.5 * (ys[1:] + ys[:-1]), 0.5 * (xs[1:] + xs[:-1])
        Y, X = np.meshgrid(cy, cx, indexing="ij")
        keep = geom.contains(np.stack([X, Y], axis=-1))
        return _grid_mesh(xs, ys, keep, outer_tag=BoundaryTag.PERIODIC_FACE,
                          periodic=True, geometry=geom, kind="cell")
    k1, k2 = snap_offsets(geom, n_div)
    snapped = CrossCellGeometry(1.0 - 2.0 * k1 / n_div, 1.0 - 2.0 * k2 / n_div)
    lines = np.arange(n_div + 1) / n_div
    ly, lx = np.meshgrid(np.arange(n_div), np.arange(n_div), indexing="ij")
    keep = _cross_mask(n_div, k1, k2, lx, ly)
    return _grid_mesh(lines, lines, keep, outer_tag=BoundaryTag.PERIODIC_FACE,
                      periodic=True, geometry=snapped, kind="cell")


def build_rectangle_mesh(n_div: int, lower=(-0.5, -0.5), upper=(0.5, 0.5)) -> StructuredQuadMesh:
    xs = lower[0] + (upper[0] - lower[0]) * np.arange(n_div + 1) / n_div
    ys = lower[1] + (upper[1] - lower[1]) * np.arange(n_div + 1) / n_div
    keep = np.ones((n_div, n_div), dtype=bool)
    return _grid_mesh(xs, ys, keep, outer_tag=BoundaryTag.OUTER_DIRICHLET, kind="macro")


def build_macro_mesh(n_div: int) -> StructuredQuadMesh:
    """Uniform mesh of the macroscopic square (-0.5, 0.5)^2."""
    if n_div < 2:
        raise ValueError("n_div must be at least 2")
    return build_rectangle_mesh(n_div)


def eps_inverse(eps: float) -> int:
    if eps <= 0:
        raise ValueError("eps must be positive")
    m = int(round(1.0 / eps))
    if m < 1 or abs(1.0 / eps - m) > 1e-9 * m:
        raise ValueError(f"1/eps = {1.0 / eps} is not a positive integer")
    return m


def cell_coordinates(x: np.ndarray, eps: float) -> np.ndarray:
    """Unit-cell coordinate of physical points in the shifted eps-lattice."""
    y = np.mod(np.asarray(x, dtype=float) / eps - 0.5, 1.0)
    return np.where(y >= 1.0, 0.0, y)


def build_perforated_mesh(eps: float, geom: CrossCellGeometry, n_div_per_cell: int) -> StructuredQuadMesh:
    """Mesh of ``Omega ∩ eps (omega + (1/2, 1/2))`` on ``Omega = (-0.5, 0.5)^2``.

    Cells cut by the outer boundary (even ``1/eps``) keep their solid part
    inside Omega.
    """
    m = eps_inverse(eps)
    n = int(n_div_per_cell)
    if n < 4:
        raise ValueError("n_div_per_cell must be at least 4")
    if m % 2 == 0 and n % 2 == 1:
        raise ValueError("even 1/eps needs an even n_div_per_cell (cells are cut at their centre)")
    k1, k2 = snap_offsets(geom, n)
    snapped = CrossCellGeometry(1.0 - 2.0 * k1 / n, 1.0 - 2.0 * k2 / n)
    N = m * n
    lines = (np.arange(N + 1) - N / 2) / N
    shift = 0 if m % 2 == 1 else n // 2
    local = (np.arange(N) - shift) % n
    ly, lx = np.meshgrid(local, local, indexing="ij")
    keep = _cross_mask(n, k1, k2, lx, ly)
    mesh = _grid_mesh(lines, lines, keep, outer_tag=BoundaryTag.OUTER_DIRICHLET,
                      geometry=snapped, kind="perforated")
    mesh._cache["eps"] = 1.0 / m
    return mesh


def _candidate_cells(lines: np.ndarray, x: np.ndarray, tol: float) -> np.ndarray:
    n = len(lines) - 1
    i0 = np.searchsorted(lines, x, side="right") - 1
    cand = i0[:, None] + np.array([-1, 0, 1])
    valid = (cand >= 0) & (cand < n)
    c = np.clip(cand, 0, n - 1)
    inside = (lines[c] - tol <= x[:, None]) & (x[:, None] <= lines[c + 1] + tol)
    return np.where(valid & inside, c, -1)


def locate_points(mesh: StructuredQuadMesh, points, strict: bool = True):
    """Vectorised point location.

    Returns ``(elements, local)``; on shared edges the smallest element index
    wins. With ``strict=False`` unlocated points get element -1.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tol = LOCATE_TOL * mesh.diameter
    cx = _candidate_cells(mesh.xs, pts[:, 0], tol)
    cy = _candidate_cells(mesh.ys, pts[:, 1], tol)
    big = np.iinfo(np.int64).max
    best = np.full(len(pts), big, dtype=np.int64)
    for a in range(3):
        for b in range(3):
            ix, iy = cx[:, a], cy[:, b]
            ok = (ix >= 0) & (iy >= 0)
            e = np.full(len(pts), -1, dtype=np.int64)
            e[ok] = mesh.cell_index[iy[ok], ix[ok]]
            e = np.where(e >= 0, e, big)
            best = np.minimum(best, e)
    missing = best == big
    if strict and np.any(missing):
        bad = pts[np.nonzero(missing)[0][0]]
        raise NotInDomainError(bad)
    elem = np.where(missing, -1, best)
    safe = np.where(missing, 0, elem)
    # points within the tolerance band of a neighbour keep their (slightly
    # outside) local coordinates so the affine map stays exact
    local = (pts - mesh.element_origin[safe]) / mesh.element_size[safe]
    return elem, local


def locate_point(mesh: StructuredQuadMesh, x) -> PointLocation:
    elem, local = locate_points(mesh, np.asarray(x, dtype=float)[None, :])
    return PointLocation(int(elem[0]), local[0])
