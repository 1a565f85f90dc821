import numpy as np
import pytest

from deformhom.mesh import CrossCellGeometry, build_macro_mesh, build_perforated_mesh
from deformhom.vtk import VTK_QUAD, read_vtk_header, write_vtk


def test_header_round_trip(tmp_path):
    mesh = build_perforated_mesh(0.5, CrossCellGeometry(1 / 3, 1 / 3), 6)
    path = tmp_path / "m.vtk"
    write_vtk(path, mesh, {"c1": np.zeros(mesh.n_nodes), "u": np.zeros((mesh.n_nodes, 2))},
              {"J_star": np.ones(mesh.n_elements)})
    head = read_vtk_header(path)
    assert head == {"points": mesh.n_nodes, "cells": mesh.n_elements, "cell_types": {VTK_QUAD}}


def test_vectors_are_padded_to_three_components(tmp_path):
    mesh = build_macro_mesh(2)
    path = tmp_path / "v.vtk"
    write_vtk(path, mesh, {"u": np.arange(2 * mesh.n_nodes, dtype=float).reshape(-1, 2)})
    lines = path.read_text().splitlines()
    i = lines.index("VECTORS u double")
    assert lines[i + 1].split() == ["0", "1", "0"]
    assert len(lines) == i + 1 + mesh.n_nodes


def test_wrong_length_is_rejected(tmp_path):
    mesh = build_macro_mesh(2)
    with pytest.raises(ValueError):
        write_vtk(tmp_path / "x.vtk", mesh, {"c": np.zeros(mesh.n_nodes + 1)})
