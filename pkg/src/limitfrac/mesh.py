"""Quadtree meshes of axis-aligned rectangles with hanging-node constraints.

Cells are squares addressed by (level, i, j): cell (l, i, j) covers
[x0 + i*s/2^l, x0 + (i+1)*s/2^l] x [y0 + j*s/2^l, ...] where s is the
root cell size.  Active leaves tile the domain exactly; after every
refinement pass the mesh is re-balanced so edge-adjacent leaves differ
by at most one level (2:1 rule).  A vertex sitting in the interior of a
coarser leaf's edge is "hanging" and is constrained to the mean of the
edge endpoints (weights 1/2, 1/2), which keeps the bilinear space
conforming.

Meshes are built single-threaded and are immutable afterwards; the
refinement operations return new instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Tuple

import numpy as np

from .vtkio import write_vtk

__all__ = ["QuadMesh", "refine_global", "refine_where", "split_slit"]

Key = Tuple[int, int, int]  # (level, i, j)


@dataclass
class QuadMesh:
    """Balanced quadtree of square cells over an axis-aligned rectangle.

    cells       : (ncell, 4) vertex ids in lexicographic corner order
                  (lower-left, lower-right, upper-left, upper-right)
    vertices    : (nvert, 2) coordinates
    cell_level  : (ncell,) refinement level per leaf
    cell_origin : (ncell, 2) lower-left corner coordinates
    cell_size   : (ncell,) side length per leaf
    constraints : hanging vertex id -> ((master id, master id), (0.5, 0.5))
    """

    origin: Tuple[float, float]
    root_size: float
    root_dims: Tuple[int, int]
    leaf_keys: Tuple[Key, ...]
    cells: np.ndarray = field(repr=False)
    vertices: np.ndarray = field(repr=False)
    cell_level: np.ndarray = field(repr=False)
    cell_origin: np.ndarray = field(repr=False)
    cell_size: np.ndarray = field(repr=False)
    constraints: Dict[int, Tuple[Tuple[int, int], Tuple[float, float]]] = field(repr=False)

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------
    @classmethod
    def rectangle(cls, x0: float, y0: float, x1: float, y1: float,
                  nx: int = 1, ny: int = 1) -> "QuadMesh":
        """Rectangle tiled by an nx x ny grid of square root cells."""
        sx = (x1 - x0) / nx
        sy = (y1 - y0) / ny
        if not np.isclose(sx, sy):
            raise ValueError("root cells must be square: (x1-x0)/nx != (y1-y0)/ny")
        leaves = tuple((0, i, j) for j in range(ny) for i in range(nx))
        return _materialize((x0, y0), sx, (nx, ny), set(leaves))

    @classmethod
    def unit_square(cls) -> "QuadMesh":
        return cls.rectangle(0.0, 0.0, 1.0, 1.0)

    # ------------------------------------------------------------------
    # derived quantities
    # ------------------------------------------------------------------
    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def h_min(self) -> float:
        return float(self.cell_size.min())

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        x0, y0 = self.origin
        return (x0, y0,
                x0 + self.root_dims[0] * self.root_size,
                y0 + self.root_dims[1] * self.root_size)

    def centroids(self) -> np.ndarray:
        return self.cell_origin + 0.5 * self.cell_size[:, None]

    def total_area(self) -> float:
        return float(np.sum(self.cell_size ** 2))

    def save_vtk(self, path: str, title: str = "mesh") -> None:
        """Write the mesh as a legacy-ASCII VTK unstructured grid."""
        write_vtk(path, title, self.vertices, self.cells)


# ----------------------------------------------------------------------
# refinement operations (functional: each returns a new mesh)
# ----------------------------------------------------------------------

def refine_global(mesh: QuadMesh, times: int) -> QuadMesh:
    """Split every leaf into 4 children, `times` passes."""
    if times < 0:
        raise ValueError("times must be nonnegative")
    leaves = set(mesh.leaf_keys)
    for _ in range(times):
        leaves = {(l + 1, 2 * i + a, 2 * j + b)
                  for (l, i, j) in leaves for a in (0, 1) for b in (0, 1)}
    return _materialize(mesh.origin, mesh.root_size, mesh.root_dims, leaves)


def refine_where(mesh: QuadMesh,
                 marker: Callable[[float, float], bool],
                 levels: int = 1) -> QuadMesh:
    """Refine every leaf whose centroid satisfies `marker`, `levels` times.

    Children of marked leaves are refined down to the target level; the
    2:1 balance is then restored by cascading refinement of neighbors.
    """
    if levels < 0:
        raise ValueError("levels must be nonnegative")
    leaves = set(mesh.leaf_keys)
    x0, y0 = mesh.origin
    s = mesh.root_size
    new_leaves = set()
    for (l, i, j) in leaves:
        h = s / (1 << l)
        cx = x0 + (i + 0.5) * h
        cy = y0 + (j + 0.5) * h
        if levels > 0 and marker(cx, cy):
            frontier = {(l, i, j)}
            for _ in range(levels):
                frontier = {(ll + 1, 2 * ii + a, 2 * jj + b)
                            for (ll, ii, jj) in frontier for a in (0, 1) for b in (0, 1)}
            new_leaves |= frontier
        else:
            new_leaves.add((l, i, j))
    return _materialize(mesh.origin, mesh.root_size, mesh.root_dims, new_leaves)


def split_slit(mesh: QuadMesh, y: float, x_from: float, x_to: float) -> QuadMesh:
    """Duplicate vertices along the horizontal segment y, x_from < x <= x_to.

    Cells below the line keep new copies of the duplicated vertices, so
    the two crack faces carry independent degrees of freedom and are
    traction free.  The vertex at x_from (the tip) is shared.  Requires
    the segment to lie on mesh lines and no hanging vertices on it.
    """
    verts = mesh.vertices
    on_line = np.isclose(verts[:, 1], y) & (verts[:, 0] > x_from + 1e-12) \
        & (verts[:, 0] <= x_to + 1e-12)
    split_ids = np.nonzero(on_line)[0]
    for v in split_ids:
        if v in mesh.constraints:
            raise ValueError("slit may not cross hanging vertices")
        for slave, (masters, _) in mesh.constraints.items():
            if v in masters:
                raise ValueError("slit may not cross constrained edges")
    new_ids = {int(v): mesh.n_vertices + k for k, v in enumerate(split_ids)}
    vertices = np.vstack([verts, verts[split_ids]])
    cells = mesh.cells.copy()
    centroids = mesh.centroids()
    below = centroids[:, 1] < y
    for c in np.nonzero(below)[0]:
        for a in range(4):
            vid = int(cells[c, a])
            if vid in new_ids:
                cells[c, a] = new_ids[vid]
    return QuadMesh(
        origin=mesh.origin, root_size=mesh.root_size, root_dims=mesh.root_dims,
        leaf_keys=mesh.leaf_keys, cells=cells, vertices=vertices,
        cell_level=mesh.cell_level, cell_origin=mesh.cell_origin,
        cell_size=mesh.cell_size, constraints=dict(mesh.constraints),
    )


# ----------------------------------------------------------------------
# internals
# ----------------------------------------------------------------------

def _balance(leaves: set, root_dims: Tuple[int, int]) -> set:
    """Enforce the 2:1 rule by refining coarse leaves with too-fine neighbors."""
    nx, ny = root_dims

    def inside(l: int, i: int, j: int) -> bool:
        return 0 <= i < nx * (1 << l) and 0 <= j < ny * (1 << l)

    changed = True
    while changed:
        changed = False
        interior = set()
        for (l, i, j) in leaves:
            ll, ii, jj = l, i, j
            while ll > 0:
                ll, ii, jj = ll - 1, ii // 2, jj // 2
                interior.add((ll, ii, jj))

        def max_adjacent_level(l: int, i: int, j: int) -> int:
            # Finest leaf level inside the edge-neighbor region (l, i, j).
            if (l, i, j) in leaves:
                return l
            if (l, i, j) not in interior:
                # neighbor is covered by a coarser leaf
                return l - 1
            best = l
            stack = [(l, i, j)]
            while stack:
                (cl, ci, cj) = stack.pop()
                for a in (0, 1):
                    for b in (0, 1):
                        child = (cl + 1, 2 * ci + a, 2 * cj + b)
                        if child in leaves:
                            best = max(best, child[0])
                        elif child in interior:
                            stack.append(child)
            return best

        to_split = set()
        for (l, i, j) in sorted(leaves):
            for (di, dj) in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if not inside(l, ni, nj):
                    continue
                if max_adjacent_level(l, ni, nj) > l + 1:
                    to_split.add((l, i, j))
                    break
        if to_split:
            changed = True
            for key in to_split:
                leaves.discard(key)
                (l, i, j) = key
                for a in (0, 1):
                    for b in (0, 1):
                        leaves.add((l + 1, 2 * i + a, 2 * j + b))
    return leaves


def _materialize(origin: Tuple[float, float], root_size: float,
                 root_dims: Tuple[int, int], leaves: set) -> QuadMesh:
    """Balance the leaf set and build vertex/constraint arrays."""
    leaves = _balance(set(leaves), root_dims)
    keys = sorted(leaves)
    lmax = max(l for (l, _, _) in keys)

    # Vertex lattice keys at the finest resolution, sorted for determinism.
    vset = set()
    for (l, i, j) in keys:
        f = 1 << (lmax - l)
        for (a, b) in ((0, 0), (1, 0), (0, 1), (1, 1)):
            vset.add(((i + a) * f, (j + b) * f))
    vkeys = sorted(vset, key=lambda k: (k[1], k[0]))
    vid = {k: n for n, k in enumerate(vkeys)}

    x0, y0 = origin
    hfine = root_size / (1 << lmax)
    vertices = np.array([[x0 + kx * hfine, y0 + ky * hfine] for (kx, ky) in vkeys])

    ncell = len(keys)
    cells = np.empty((ncell, 4), dtype=np.int64)
    cell_level = np.empty(ncell, dtype=np.int64)
    cell_origin = np.empty((ncell, 2))
    cell_size = np.empty(ncell)
    for n, (l, i, j) in enumerate(keys):
        f = 1 << (lmax - l)
        cells[n] = (vid[(i * f, j * f)], vid[((i + 1) * f, j * f)],
                    vid[(i * f, (j + 1) * f)], vid[((i + 1) * f, (j + 1) * f)])
        cell_level[n] = l
        h = root_size / (1 << l)
        cell_origin[n] = (x0 + i * h, y0 + j * h)
        cell_size[n] = h

    # Hanging vertices: the midpoint of an unsplit leaf edge that exists in
    # the lattice must be the corner of a finer neighbor across that edge.
    constraints: Dict[int, Tuple[Tuple[int, int], Tuple[float, float]]] = {}
    for n, (l, i, j) in enumerate(keys):
        if l == lmax:
            continue
        f = 1 << (lmax - l)
        corner = {(a, b): ((i + a) * f, (j + b) * f)
                  for (a, b) in ((0, 0), (1, 0), (0, 1), (1, 1))}
        for (ca, cb) in (((0, 0), (1, 0)), ((0, 1), (1, 1)),
                         ((0, 0), (0, 1)), ((1, 0), (1, 1))):
            ka, kb = corner[ca], corner[cb]
            mid = ((ka[0] + kb[0]) // 2, (ka[1] + kb[1]) // 2)
            if mid in vid:
                constraints[vid[mid]] = ((vid[ka], vid[kb]), (0.5, 0.5))

    return QuadMesh(
        origin=origin, root_size=root_size, root_dims=root_dims,
        leaf_keys=tuple(keys), cells=cells, vertices=vertices,
        cell_level=cell_level, cell_origin=cell_origin, cell_size=cell_size,
        constraints=constraints,
    )
