"""Structured triangulations of the unit square and nested observation lattices.

Vertex ``(i, j)`` of an ``n x n`` mesh sits at ``(i/n, j/n)`` and has index
``j*(n+1) + i``.  Every square cell is cut along its bottom-left to top-right
diagonal, so a coarse mesh built with the same rule is nested in the fine one
whenever the coarse resolution divides the fine resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INTERIOR = 0
WALL = 1
LID = 2

TAG_NAMES = {INTERIOR: "interior", WALL: "wall", LID: "lid"}


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Mesh:
    """Triangulation of the unit square.

    Attributes
    ----------
    n : int
        Cells per side.
    vertices : (V, 2) float array
    triangles : (T, 3) int array, counterclockwise
    edges : (E, 2) int array, each row sorted ascending
    tri_edges : (T, 3) int array
        Edge index of local edges (v0,v1), (v1,v2), (v2,v0).
    vertex_tags, edge_tags : int arrays with values INTERIOR, WALL, LID
    """

    n: int
    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    tri_edges: np.ndarray
    vertex_tags: np.ndarray
    edge_tags: np.ndarray

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_midpoints(self) -> np.ndarray:
        return 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])

    def vertex_index(self, i: int, j: int) -> int:
        return j * (self.n + 1) + i

    def dump(self) -> str:
        """Plain-text listing, one ``vtx x y tag`` or ``tri a b c`` per line."""
        lines = [
            f"vtx {x!r} {y!r} {TAG_NAMES[int(t)]}"
            for (x, y), t in zip(self.vertices.tolist(), self.vertex_tags)
        ]
        lines += [f"tri {a} {b} {c}" for a, b, c in self.triangles.tolist()]
        return "\n".join(lines) + "\n"


def _lattice(n: int) -> np.ndarray:
    idx = np.arange(n + 1)
    # i/n on both fine and coarse grids keeps nested nodes bitwise identical
    coords = idx / n
    xx, yy = np.meshgrid(coords, coords, indexing="xy")
    return np.column_stack([xx.ravel(), yy.ravel()])


def _cell_triangles(n: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    i, j = i.ravel(), j.ravel()
    a = j * (n + 1) + i
    b = a + 1
    c = a + n + 2
    d = a + n + 1
    lower = np.column_stack([a, b, c])
    upper = np.column_stack([a, c, d])
    tris = np.empty((2 * n * n, 3), dtype=np.int64)
    tris[0::2] = lower
    tris[1::2] = upper
    return tris


def _vertex_tags(vertices: np.ndarray) -> np.ndarray:
    x, y = vertices[:, 0], vertices[:, 1]
    tags = np.full(len(vertices), INTERIOR, dtype=np.int8)
    tags[(x == 0.0) | (x == 1.0) | (y == 0.0)] = WALL
    # top corners belong to the lid (leaky cavity)
    tags[y == 1.0] = LID
    return tags


def build_uniform_triangulation(n: int) -> Mesh:
    """Right-angled triangulation of the unit square with ``n`` cells per side."""
    if int(n) != n or n < 1:
        raise ValueError(f"mesh resolution must be a positive integer, got {n!r}")
    n = int(n)
    vertices = _lattice(n)
    triangles = _cell_triangles(n)

    local = triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 3, 2)
    pairs = np.sort(local.reshape(-1, 2), axis=1)
    edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
    tri_edges = inverse.reshape(-1, 3)

    vtags = _vertex_tags(vertices)
    mid = 0.5 * (vertices[edges[:, 0]] + vertices[edges[:, 1]])
    etags = np.full(len(edges), INTERIOR, dtype=np.int8)
    on_boundary = (mid[:, 0] == 0.0) | (mid[:, 0] == 1.0) | (mid[:, 1] == 0.0) | (mid[:, 1] == 1.0)
    etags[on_boundary] = WALL
    etags[mid[:, 1] == 1.0] = LID

    mesh = Mesh(
        n=n,
        vertices=_frozen(vertices),
        triangles=_frozen(triangles),
        edges=_frozen(edges),
        tri_edges=_frozen(tri_edges),
        vertex_tags=_frozen(vtags),
        edge_tags=_frozen(etags),
    )
    assert mesh.n_vertices == (n + 1) ** 2
    assert mesh.n_triangles == 2 * n * n
    assert mesh.n_edges == 3 * n * n + 2 * n
    return mesh


@dataclass(frozen=True)
class ObservationNodeSet:
    """Coarse lattice nodes expressed as fine-mesh vertex indices.

    ``fine_vertex_indices[k]`` is the fine vertex that carries coarse node
    ``k``; coarse nodes are numbered like mesh vertices (row-major from the
    bottom-left corner).
    """

    n_H: int
    fine_vertex_indices: np.ndarray
    coarse_triangles: np.ndarray
    coordinates: np.ndarray
    on_boundary: np.ndarray

    @property
    def H(self) -> float:
        return 1.0 / self.n_H

    def __len__(self) -> int:
        return len(self.fine_vertex_indices)


def observation_nodes(fine: Mesh, n_H: int) -> ObservationNodeSet:
    """Select the ``(n_H+1)**2`` coarse lattice nodes out of ``fine``."""
    if int(n_H) != n_H or n_H < 1:
        raise ValueError(f"coarse resolution must be a positive integer, got {n_H!r}")
    n_H = int(n_H)
    if fine.n % n_H != 0:
        raise ValueError(
            f"coarse resolution {n_H} does not divide fine resolution {fine.n}; "
            "observation nodes would not be fine-mesh vertices"
        )
    r = fine.n // n_H
    I, J = np.meshgrid(np.arange(n_H + 1), np.arange(n_H + 1), indexing="xy")
    I, J = I.ravel(), J.ravel()
    idx = (J * r) * (fine.n + 1) + I * r
    coords = _lattice(n_H)
    if not np.array_equal(fine.vertices[idx], coords):
        raise AssertionError("coarse lattice is not nested in the fine mesh")
    x, y = coords[:, 0], coords[:, 1]
    boundary = (x == 0.0) | (x == 1.0) | (y == 0.0) | (y == 1.0)
    return ObservationNodeSet(
        n_H=n_H,
        fine_vertex_indices=_frozen(idx),
        coarse_triangles=_frozen(_cell_triangles(n_H)),
        coordinates=_frozen(coords),
        on_boundary=_frozen(boundary),
    )
