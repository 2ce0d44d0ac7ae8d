"""Field exports for external viewers: legacy VTK unstructured grids and CSV."""
from __future__ import annotations

import numpy as np

from .mesh import Mesh

_VTK_CELL_TYPES = {2: 5, 3: 10}  # triangle, tetrahedron


def write_vtk_legacy(mesh: Mesh, values: np.ndarray, path, name: str = "field") -> None:
    """Legacy-VTK unstructured grid with one scalar or vector point field.

    2D points and 2D vectors are padded with a zero z component per the VTK
    convention.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != mesh.n_nodes:
        raise ValueError(
            f"field has {values.shape[0]} rows for a mesh with {mesh.n_nodes} nodes")
    n_comp = values.shape[1]
    if n_comp not in (1, 2, 3):
        raise ValueError(f"can export 1-3 components, got {n_comp}")

    points = mesh.coords
    if mesh.dim == 2:
        points = np.concatenate([points, np.zeros((mesh.n_nodes, 1))], axis=1)
    n_loc = mesh.dim + 1

    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("pigmen export\n")
        fh.write("ASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_nodes} double\n")
        for row in points:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        fh.write(f"CELLS {mesh.n_elements} {mesh.n_elements * (n_loc + 1)}\n")
        for elem in mesh.elements:
            fh.write(f"{n_loc} " + " ".join(str(int(v)) for v in elem) + "\n")
        fh.write(f"CELL_TYPES {mesh.n_elements}\n")
        cell_type = _VTK_CELL_TYPES[mesh.dim]
        for _ in range(mesh.n_elements):
            fh.write(f"{cell_type}\n")
        fh.write(f"POINT_DATA {mesh.n_nodes}\n")
        if n_comp == 1:
            fh.write(f"SCALARS {name} double 1\n")
            fh.write("LOOKUP_TABLE default\n")
            for v in values[:, 0]:
                fh.write(repr(float(v)) + "\n")
        else:
            padded = values
            if n_comp == 2:
                padded = np.concatenate([values, np.zeros((mesh.n_nodes, 1))], axis=1)
            fh.write(f"VECTORS {name} double\n")
            for row in padded:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def write_csv(mesh: Mesh, values: np.ndarray, path) -> None:
    """Flat CSV: x,y[,z],v0[,v1...] with full-precision values."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != mesh.n_nodes:
        raise ValueError(
            f"field has {values.shape[0]} rows for a mesh with {mesh.n_nodes} nodes")
    coord_names = ["x", "y", "z"][:mesh.dim]
    value_names = [f"v{i}" for i in range(values.shape[1])]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(coord_names + value_names) + "\n")
        for xyz, row in zip(mesh.coords, values):
            cells = [repr(float(v)) for v in xyz] + [repr(float(v)) for v in row]
            fh.write(",".join(cells) + "\n")


def read_csv(path):
    """Round-trip reader for the CSV export; returns (coords, values)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        dim = sum(1 for name in header if name in ("x", "y", "z"))
        rows = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
    data = np.asarray(rows)
    return data[:, :dim], data[:, dim:]
