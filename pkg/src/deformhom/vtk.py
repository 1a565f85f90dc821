"""Legacy ASCII VTK export of quad meshes with point and cell data."""

from __future__ import annotations

import numpy as np

VTK_QUAD = 9


def _fmt(a) -> str:
    return " ".join(f"{v:.10g}" for v in np.ravel(a))


def _data_block(lines, data: dict, n: int):
    for name, arr in data.items():
        arr = np.asarray(arr, dtype=float)
        if arr.shape[0] != n:
            raise ValueError(f"{name}: expected {n} rows, got {arr.shape[0]}")
        arr = arr.reshape(n, -1)
        if arr.shape[1] == 1:
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{v:.10g}" for v in arr[:, 0])
        elif arr.shape[1] in (2, 3):
            pad = np.zeros((n, 3))
            pad[:, : arr.shape[1]] = arr
            lines.append(f"VECTORS {name} double")
            lines.extend(_fmt(r) for r in pad)
        else:
            lines.append(f"FIELD {name} 1")
            lines.append(f"{name} {arr.shape[1]} {n} double")
            lines.extend(_fmt(r) for r in arr)


def write_vtk(path, mesh, point_data: dict | None = None, cell_data: dict | None = None,
              title: str = "deformhom") -> None:
    """Write an unstructured grid of Q1 quads (cell type 9)."""
    pts = np.zeros((mesh.n_nodes, 3))
    pts[:, :2] = mesh.nodes
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_nodes} double"]
    lines.extend(_fmt(p) for p in pts)
    E = mesh.n_elements
    lines.append(f"CELLS {E} {5 * E}")
    lines.extend("4 " + " ".join(str(int(i)) for i in el) for el in mesh.elements)
    lines.append(f"CELL_TYPES {E}")
    lines.extend([str(VTK_QUAD)] * E)
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_nodes}")
        _data_block(lines, point_data, mesh.n_nodes)
    if cell_data:
        lines.append(f"CELL_DATA {E}")
        _data_block(lines, cell_data, E)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_vtk_header(path) -> dict:
    """Counts of points, cells and the set of cell types (for round-trip checks)."""
    with open(path) as fh:
        tokens = fh.read().split("\n")
    out = {}
    for i, line in enumerate(tokens):
        if line.startswith("POINTS"):
            out["points"] = int(line.split()[1])
        elif line.startswith("CELLS"):
            out["cells"] = int(line.split()[1])
        elif line.startswith("CELL_TYPES"):
            n = int(line.split()[1])
            out["cell_types"] = set(int(t) for t in tokens[i + 1:i + 1 + n])
    return out
