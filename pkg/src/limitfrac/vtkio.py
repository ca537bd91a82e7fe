"""Minimal legacy-ASCII VTK writer for quad meshes."""

from __future__ import annotations

import numpy as np

VTK_QUAD = 9


def write_vtk(path, title, vertices, cells, point_data=None, cell_data=None):
    """Write an unstructured grid of quad cells.

    point_data / cell_data: dict name -> array; arrays of shape (n,) are
    written as scalars, (n, 2) as 3-vectors with zero z-component.
    """
    vertices = np.asarray(vertices, dtype=float)
    cells = np.asarray(cells, dtype=np.int64)
    npts = len(vertices)
    ncell = len(cells)
    try:
        f = open(path, "w")
    except OSError as exc:
        raise OSError(f"cannot write VTK file {path!r}: {exc}") from exc
    with f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write(f"{title}\n")
        f.write("ASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {npts} double\n")
        for x, y in vertices:
            f.write(f"{x:.12g} {y:.12g} 0\n")
        f.write(f"CELLS {ncell} {5 * ncell}\n")
        for c in cells:
            # VTK quads are ordered counterclockwise around the cell
            f.write(f"4 {c[0]} {c[1]} {c[3]} {c[2]}\n")
        f.write(f"CELL_TYPES {ncell}\n")
        for _ in range(ncell):
            f.write(f"{VTK_QUAD}\n")
        if point_data:
            f.write(f"POINT_DATA {npts}\n")
            for name, arr in point_data.items():
                arr = np.asarray(arr, dtype=float)
                if arr.ndim == 1:
                    f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    for v in arr:
                        f.write(f"{v:.12g}\n")
                else:
                    f.write(f"VECTORS {name} double\n")
                    for vx, vy in arr:
                        f.write(f"{vx:.12g} {vy:.12g} 0\n")
        if cell_data:
            f.write(f"CELL_DATA {ncell}\n")
            for name, arr in cell_data.items():
                arr = np.asarray(arr, dtype=float)
                f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for v in arr:
                    f.write(f"{v:.12g}\n")


def read_vtk_points_and_scalars(path):
    """Parse points plus scalar/vector data back (used by round-trip tests)."""
    points = []
    scalars = {}
    vectors = {}
    with open(path) as f:
        lines = f.read().splitlines()
    k = 0
    count = 0
    while k < len(lines):
        line = lines[k]
        if line.startswith("POINTS"):
            count = int(line.split()[1])
            for row in lines[k + 1:k + 1 + count]:
                x, y, _ = (float(t) for t in row.split())
                points.append((x, y))
            k += count
        elif line.startswith(("POINT_DATA", "CELL_DATA")):
            count = int(line.split()[1])
        elif line.startswith("SCALARS"):
            name = line.split()[1]
            vals = [float(v) for v in lines[k + 2:k + 2 + count]]
            scalars[name] = np.array(vals)
            k += count + 1
        elif line.startswith("VECTORS"):
            name = line.split()[1]
            rows = [tuple(float(t) for t in r.split()) for r in lines[k + 1:k + 1 + count]]
            vectors[name] = np.array(rows)[:, :2]
            k += count
        k += 1
    return np.array(points), scalars, vectors
