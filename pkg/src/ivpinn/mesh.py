"""Conforming simplicial meshes in one and two dimensions.

Triangles are stored as positively oriented vertex triples, intervals as
ordered vertex pairs.  Boundary facets (edges in 2D, end points in 1D) carry
a tag, ``"D"`` for Dirichlet or ``"N"`` for Neumann.

Nested refinement and the Lagrange node numbering of :mod:`ivpinn.fem` share
the same lattice machinery: the degree-``k`` lattice of a triangle is numbered
globally by integer keys (vertex id, edge id and position along the edge,
element id and interior position), so no coordinate snapping is ever needed.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

DIRICHLET = "D"
NEUMANN = "N"
_TAGS = (DIRICHLET, NEUMANN)

SIDES = ("bottom", "right", "top", "left")


class MeshError(ValueError):
    """Raised when a mesh violates one of its structural invariants."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable simplicial mesh.

    Attributes
    ----------
    vertices : (nv, dim) float array
    elements : (ne, dim + 1) int array
    boundary_facets : (nb, dim) int array
        Vertex pairs of boundary edges (2D) or single end vertices (1D).
    boundary_tags : (nb,) array of ``"D"`` / ``"N"``
    parent_map : (ne,) int array or None
        For a mesh produced by :func:`refine_nested`, the index of the coarse
        element containing each fine element.
    """

    vertices: np.ndarray
    elements: np.ndarray
    boundary_facets: np.ndarray
    boundary_tags: np.ndarray
    parent_map: np.ndarray | None = None

    def __post_init__(self):
        for name in ("vertices", "elements", "boundary_facets", "boundary_tags", "parent_map"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def element_vertices(self) -> np.ndarray:
        """Coordinates of every element, shape ``(ne, dim + 1, dim)``."""
        return self.vertices[self.elements]

    def signed_measures(self) -> np.ndarray:
        v = self.element_vertices()
        if self.dim == 1:
            return v[:, 1, 0] - v[:, 0, 0]
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def measures(self) -> np.ndarray:
        return np.abs(self.signed_measures())

    def diameters(self) -> np.ndarray:
        v = self.element_vertices()
        if self.dim == 1:
            return np.abs(v[:, 1, 0] - v[:, 0, 0])
        lengths = [np.linalg.norm(v[:, a] - v[:, b], axis=1) for a, b in ((0, 1), (1, 2), (2, 0))]
        return np.max(lengths, axis=0)

    def facets(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique element facets and, per element, the index of each local facet.

        Local facet ``m`` of a triangle is the edge opposite vertex ``m``.
        Facets are returned with sorted vertex ids.
        """
        if self.dim == 1:
            all_f = self.elements.reshape(-1, 1)
            uniq, inv = np.unique(all_f, axis=0, return_inverse=True)
            return uniq, inv.reshape(-1, 2)[:, ::-1]
        t = self.elements
        local = np.stack([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]], axis=1)
        flat = np.sort(local.reshape(-1, 2), axis=1)
        uniq, inv = np.unique(flat, axis=0, return_inverse=True)
        return uniq, inv.reshape(-1, 3)

    def boundary_facet_elements(self) -> np.ndarray:
        """Index of the (unique) element adjacent to each boundary facet."""
        uniq, elem_facets = self.facets()
        owner = np.full(len(uniq), -1)
        owner[elem_facets.ravel()] = np.repeat(np.arange(self.n_elements), elem_facets.shape[1])
        keys = np.sort(self.boundary_facets, axis=1)
        idx = _row_lookup(uniq, keys)
        return owner[idx]

    def check(self) -> None:
        """Validate conformity, orientation and boundary tagging."""
        if np.any(self.signed_measures() <= 0):
            raise MeshError("element with non-positive orientation")
        uniq, elem_facets = self.facets()
        counts = np.bincount(elem_facets.ravel(), minlength=len(uniq))
        if np.any(counts > 2):
            raise MeshError("non-conforming mesh: facet shared by more than two elements")
        boundary = uniq[counts == 1]
        tagged = np.sort(self.boundary_facets, axis=1)
        if len(tagged) != len(boundary):
            raise MeshError("boundary facets and tags out of sync")
        if len(np.unique(tagged, axis=0)) != len(tagged):
            raise MeshError("boundary facet tagged more than once")
        if not np.array_equal(np.unique(tagged, axis=0), boundary):
            raise MeshError("tagged facets do not match the topological boundary")
        if not set(np.unique(self.boundary_tags)) <= set(_TAGS):
            raise MeshError("unknown boundary tag")
        if not np.any(self.boundary_tags == DIRICHLET):
            raise MeshError("Dirichlet boundary must have positive measure")
        if self.parent_map is not None and len(self.parent_map) != self.n_elements:
            raise MeshError("parent map length mismatch")


def _row_lookup(table: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Row index in ``table`` (unique, lexsorted rows) of each row of ``keys``."""
    view = lambda a: np.ascontiguousarray(a).view([("", a.dtype)] * a.shape[1]).ravel()
    tv, kv = view(table.astype(np.int64)), view(keys.astype(np.int64))
    idx = np.searchsorted(tv, kv)
    if np.any(idx >= len(tv)) or np.any(tv[np.minimum(idx, len(tv) - 1)] != kv):
        raise MeshError("facet not found in mesh")
    return idx


def build_structured_mesh(nx: int, ny: int | None = None, domain=((0.0, 1.0), (0.0, 1.0)),
                          boundary_spec: dict | None = None) -> Mesh:
    """Split an ``nx`` by ``ny`` grid of rectangles along their SW-NE diagonals.

    ``boundary_spec`` maps side names (``bottom``, ``right``, ``top``,
    ``left``) to tags; missing sides default to Dirichlet.
    """
    ny = nx if ny is None else ny
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be positive")
    (x0, x1), (y0, y1) = domain
    if not (x1 > x0 and y1 > y0):
        raise MeshError("degenerate domain")
    spec = {side: DIRICHLET for side in SIDES}
    spec.update(boundary_spec or {})
    if set(spec) - set(SIDES) or set(spec.values()) - set(_TAGS):
        raise ValueError(f"bad boundary spec {boundary_spec!r}")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    vid = lambda i, j: j * (nx + 1) + i

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    sw, se, ne, nw = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
    lower = np.column_stack([sw, se, ne])
    upper = np.column_stack([sw, ne, nw])
    elements = np.stack([lower, upper], axis=1).reshape(-1, 3)

    ii, jj = np.arange(nx), np.arange(ny)
    sides = {
        "bottom": np.column_stack([vid(ii, 0), vid(ii + 1, 0)]),
        "right": np.column_stack([vid(nx, jj), vid(nx, jj + 1)]),
        "top": np.column_stack([vid(ii + 1, ny), vid(ii, ny)]),
        "left": np.column_stack([vid(0, jj + 1), vid(0, jj)]),
    }
    facets = np.vstack([sides[s] for s in SIDES])
    tags = np.concatenate([np.full(len(sides[s]), spec[s]) for s in SIDES])
    mesh = Mesh(vertices, elements, facets, tags)
    mesh.check()
    return mesh


def build_interval_mesh(n: int, domain=(0.0, 1.0), boundary_spec: dict | None = None) -> Mesh:
    """Uniform partition of an interval; both ends Dirichlet unless overridden."""
    if n < 1:
        raise ValueError("n must be positive")
    a, b = domain
    if not b > a:
        raise MeshError("degenerate domain")
    spec = {"left": DIRICHLET, "right": DIRICHLET}
    spec.update(boundary_spec or {})
    vertices = np.linspace(a, b, n + 1)[:, None]
    elements = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    mesh = Mesh(vertices, elements, np.array([[0], [n]]), np.array([spec["left"], spec["right"]]))
    mesh.check()
    return mesh


def meshsize(mesh: Mesh) -> float:
    """Largest element diameter."""
    if mesh.n_elements == 0:
        raise ValueError("empty mesh")
    return float(mesh.diameters().max())


# -- lattices -----------------------------------------------------------------

def lattice_indices(k: int, dim: int = 2) -> np.ndarray:
    """Integer lattice of the degree-``k`` reference simplex.

    In 2D the rows are ``(i, j)`` with ``i + j <= k``, ordered by ``j`` then
    ``i``; the point is ``v0 + i/k (v1 - v0) + j/k (v2 - v0)``.  In 1D the
    rows are ``(i,)`` for ``i = 0..k``.
    """
    if dim == 1:
        return np.arange(k + 1)[:, None]
    return np.array([(i, j) for j in range(k + 1) for i in range(k + 1 - j)])


@dataclass(frozen=True, eq=False)
class Lattice:
    """Global numbering of the degree-``k`` lattice over a mesh."""

    degree: int
    points: np.ndarray          # (n_nodes, dim)
    element_nodes: np.ndarray   # (ne, n_local)
    facets: np.ndarray          # unique facets used for the numbering
    facet_nodes: np.ndarray     # (n_facets, k + 1) nodes along each facet, from low to high vertex id


def build_lattice(mesh: Mesh, k: int) -> Lattice:
    """Number the degree-``k`` lattice nodes of ``mesh`` with shared facet nodes."""
    if k < 1:
        raise ValueError("lattice degree must be >= 1")
    nv, ne = mesh.n_vertices, mesh.n_elements
    t = mesh.elements
    coords = mesh.element_vertices()
    lat = lattice_indices(k, mesh.dim)

    if mesh.dim == 1:
        n_int = k - 1
        gids = np.empty((ne, k + 1), dtype=np.int64)
        gids[:, 0], gids[:, k] = t[:, 0], t[:, 1]
        gids[:, 1:k] = nv + np.arange(ne)[:, None] * n_int + np.arange(n_int)
        pts = np.empty((nv + ne * n_int, 1))
        pts[:nv] = mesh.vertices
        frac = np.arange(1, k) / k
        pts[nv:, 0] = (coords[:, 0, 0][:, None] + frac * (coords[:, 1, 0] - coords[:, 0, 0])[:, None]).ravel()
        facets = np.arange(nv)[:, None]
        return Lattice(k, pts, gids, facets, facets.copy())

    edges, elem_edges = mesh.facets()     # local edge m opposite vertex m
    n_edges = len(edges)
    n_edge_int = k - 1
    n_cell_int = (k - 1) * (k - 2) // 2
    edge_base = nv
    cell_base = nv + n_edges * n_edge_int

    def edge_node(el_edge, a, b, pos_from_a):
        # pos measured from vertex a; canonical orientation runs from the lower id
        pos = np.where(a < b, pos_from_a, k - pos_from_a)
        return edge_base + el_edge * n_edge_int + (pos - 1)

    gids = np.empty((ne, len(lat)), dtype=np.int64)
    interior_counter = 0
    for m, (i, j) in enumerate(lat):
        if (i, j) == (0, 0):
            gids[:, m] = t[:, 0]
        elif (i, j) == (k, 0):
            gids[:, m] = t[:, 1]
        elif (i, j) == (0, k):
            gids[:, m] = t[:, 2]
        elif j == 0:
            gids[:, m] = edge_node(elem_edges[:, 2], t[:, 0], t[:, 1], i)
        elif i == 0:
            gids[:, m] = edge_node(elem_edges[:, 1], t[:, 0], t[:, 2], j)
        elif i + j == k:
            gids[:, m] = edge_node(elem_edges[:, 0], t[:, 1], t[:, 2], j)
        else:
            gids[:, m] = cell_base + np.arange(ne) * n_cell_int + interior_counter
            interior_counter += 1

    pts = np.empty((cell_base + ne * n_cell_int, 2))
    pts[:nv] = mesh.vertices
    frac = np.arange(1, k) / k
    va, vb = mesh.vertices[edges[:, 0]], mesh.vertices[edges[:, 1]]
    pts[edge_base:cell_base] = (va[:, None, :] + frac[None, :, None] * (vb - va)[:, None, :]).reshape(-1, 2)
    if n_cell_int:
        interior = [(m, i, j) for m, (i, j) in enumerate(lat) if i > 0 and j > 0 and i + j < k]
        for m, i, j in interior:
            pts[gids[:, m]] = coords[:, 0] + (i / k) * (coords[:, 1] - coords[:, 0]) + (j / k) * (coords[:, 2] - coords[:, 0])

    facet_nodes = np.empty((n_edges, k + 1), dtype=np.int64)
    facet_nodes[:, 0], facet_nodes[:, k] = edges[:, 0], edges[:, 1]
    facet_nodes[:, 1:k] = edge_base + np.arange(n_edges)[:, None] * n_edge_int + np.arange(n_edge_int)
    return Lattice(k, pts, gids, edges, facet_nodes)


def facet_lattice_nodes(mesh: Mesh, lattice: Lattice, facets: np.ndarray) -> np.ndarray:
    """Lattice nodes along each given facet, ordered from its first vertex."""
    if mesh.dim == 1:
        return facets.copy()
    keys = np.sort(facets, axis=1)
    idx = _row_lookup(lattice.facets, keys)
    nodes = lattice.facet_nodes[idx]
    flip = facets[:, 0] > facets[:, 1]
    nodes[flip] = nodes[flip, ::-1]
    return nodes


def refine_nested(mesh: Mesh, s: int) -> Mesh:
    """Uniform ``s``-section of every element.

    Each triangle is split into ``s**2`` congruent children on its
    degree-``s`` lattice; each interval into ``s`` equal pieces.  Boundary
    tags are inherited and ``parent_map`` records the coarse element of each
    child.
    """
    if s < 1:
        raise ValueError("subdivision factor must be >= 1")
    if s == 1:
        return Mesh(mesh.vertices, mesh.elements, mesh.boundary_facets, mesh.boundary_tags,
                    np.arange(mesh.n_elements))
    lat = build_lattice(mesh, s)
    ne = mesh.n_elements
    if mesh.dim == 1:
        children = np.stack([lat.element_nodes[:, :-1], lat.element_nodes[:, 1:]], axis=2)
        elements = children.reshape(-1, 2)
        parent = np.repeat(np.arange(ne), s)
        fine = Mesh(lat.points, elements, mesh.boundary_facets, mesh.boundary_tags, parent)
        fine.check()
        return fine

    local = {tuple(ij): m for m, ij in enumerate(lattice_indices(s))}
    tris = []
    for j in range(s):
        for i in range(s - j):
            tris.append((local[i, j], local[i + 1, j], local[i, j + 1]))
            if i + j <= s - 2:
                tris.append((local[i + 1, j], local[i + 1, j + 1], local[i, j + 1]))
    tris = np.array(tris)
    elements = lat.element_nodes[:, tris].reshape(-1, 3)
    parent = np.repeat(np.arange(ne), len(tris))

    along = facet_lattice_nodes(mesh, lat, mesh.boundary_facets)
    facets = np.stack([along[:, :-1], along[:, 1:]], axis=2).reshape(-1, 2)
    tags = np.repeat(mesh.boundary_tags, s)
    fine = Mesh(lat.points, elements, facets, tags, parent)
    fine.check()
    return fine


# -- plain-text mesh files ----------------------------------------------------

def write_mesh(mesh: Mesh, path) -> None:
    """Write ``dim nv ne nb`` header, vertices, elements, tagged boundary facets."""
    lines = [f"{mesh.dim} {mesh.n_vertices} {mesh.n_elements} {len(mesh.boundary_facets)}"]
    lines += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines += [" ".join(str(int(i)) for i in e) for e in mesh.elements]
    lines += [" ".join(str(int(i)) for i in f) + f" {tag}" for f, tag in zip(mesh.boundary_facets, mesh.boundary_tags)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    """Read the format produced by :func:`write_mesh`.

    Triangles given clockwise are reoriented.  Blank lines and ``#``
    comments are ignored.
    """
    rows = [ln.split("#")[0].split() for ln in Path(path).read_text().splitlines()]
    rows = [r for r in rows if r]
    try:
        dim, nv, ne, nb = (int(x) for x in rows[0])
        verts = np.array([[float(x) for x in r] for r in rows[1:1 + nv]])
        elems = np.array([[int(x) for x in r] for r in rows[1 + nv:1 + nv + ne]])
        brows = rows[1 + nv + ne:1 + nv + ne + nb]
        facets = np.array([[int(x) for x in r[:-1]] for r in brows])
        tags = np.array([r[-1] for r in brows])
    except (ValueError, IndexError) as exc:
        raise MeshError(f"malformed mesh file {path}: {exc}") from exc
    if verts.shape != (nv, dim) or elems.shape != (ne, dim + 1) or facets.shape != (nb, dim):
        raise MeshError(f"mesh file {path} does not match its header")
    mesh = Mesh(verts, elems, facets, tags)
    if dim == 2:
        flip = mesh.signed_measures() < 0
        if np.any(flip):
            elems = elems.copy()
            elems[flip] = elems[flip][:, [0, 2, 1]]
            mesh = Mesh(verts, elems, facets, tags)
    mesh.check()
    return mesh
