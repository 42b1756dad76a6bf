"""Artifact writers: CSV tables, legacy-VTK fields, run manifests."""

from __future__ import annotations

import numpy as np

from .analysis import Sampler


def fmt(value):
    """Deterministic scalar formatting: 17 significant digits for floats."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def write_csv(path, columns, rows, comments=()):
    """Comma-separated table with '#'-prefixed comment header lines."""
    lines = [f"# {c}" for c in comments]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_manifest(path, entries):
    """Plain-text 'key = value' file, keys in insertion order."""
    with open(path, "w") as fh:
        for key, value in entries.items():
            fh.write(f"{key} = {fmt(value)}\n")


def write_vtk(path, solution, m=None, title="bubblezoom field"):
    """Legacy ASCII VTK (3.0) unstructured grid of the enriched field.

    Each element contributes its own (m+1)x(m+1) sample lattice of points
    (shared edges repeat points) connected by quad cells, with the sampled
    field attached as POINT_DATA scalar "u".
    """
    sampler = Sampler(solution, m=m)
    m = sampler.m
    n_elem = solution.grid.n_elements
    fields = sampler.sample()
    per_elem = (m + 1) * (m + 1)
    npts = n_elem * per_elem
    ncell = n_elem * m * m
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {npts} double",
    ]
    for e in range(n_elem):
        X, Y = sampler.sample_points(e)
        X, Y = np.broadcast_arrays(X, Y)
        for i in range(m + 1):
            for j in range(m + 1):
                lines.append(f"{fmt(X[i, j])} {fmt(Y[i, j])} 0")
    lines.append(f"CELLS {ncell} {5 * ncell}")
    for e in range(n_elem):
        base = e * per_elem
        for i in range(m):
            for j in range(m):
                a = base + i * (m + 1) + j
                b = base + (i + 1) * (m + 1) + j
                lines.append(f"4 {a} {b} {b + 1} {a + 1}")
    lines.append(f"CELL_TYPES {ncell}")
    lines.extend(["9"] * ncell)
    lines.append(f"POINT_DATA {npts}")
    lines.append("SCALARS u double 1")
    lines.append("LOOKUP_TABLE default")
    for e in range(n_elem):
        F = fields[e]
        for i in range(m + 1):
            for j in range(m + 1):
                lines.append(fmt(F[i, j]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
