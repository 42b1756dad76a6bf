"""Structured square meshes with an active-element mask.

A Grid lives on an axis-aligned rectangle subdivided into nx x ny squares of
side h.  Element and vertex indices refer to the lattice; an optional mask
deactivates elements (this is how L-shaped domains are represented).  Element
vertices are ordered counterclockwise from the lower-left corner, matching
the Q1 local order in :mod:`bubblezoom.q1`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: patch orientations: "h" is two elements side by side (a vertical interior
#: edge, reference domain (0,2)x(0,1)); "v" is two stacked elements.
HORIZONTAL = "h"
VERTICAL = "v"


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Patch:
    """Two active elements sharing an interior edge."""

    edge: int
    orientation: str  # HORIZONTAL or VERTICAL
    elements: tuple  # (left, right) or (bottom, top) element ids


@dataclass
class Grid:
    origin: tuple
    extent: tuple
    nx: int
    ny: int
    h: float
    active: np.ndarray  # (nx, ny) bool
    # derived tables
    elements: np.ndarray = field(default=None, repr=False)  # (n_elem, 2) lattice
    elem_id: np.ndarray = field(default=None, repr=False)  # (nx, ny) -> id or -1
    patches: list = field(default=None, repr=False)  # list[Patch]
    # per element, patch id in each edge slot (left, right, bottom, top), -1 if none
    elem_patches: np.ndarray = field(default=None, repr=False)  # (n_elem, 4)

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def n_interior_edges(self):
        return len(self.patches)

    @property
    def n_lattice_vertices(self):
        return (self.nx + 1) * (self.ny + 1)

    def vertex_coords(self, i, j):
        return (self.origin[0] + i * self.h, self.origin[1] + j * self.h)

    def element_vertices(self, e):
        """Lattice indices of the 4 vertices, ccw from lower-left."""
        i, j = self.elements[e]
        return ((i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1))

    def element_origin(self, e):
        i, j = self.elements[e]
        return (self.origin[0] + i * self.h, self.origin[1] + j * self.h)

    def element_center(self, e):
        x0, y0 = self.element_origin(e)
        return (x0 + 0.5 * self.h, y0 + 0.5 * self.h)

    def vertex_active_mask(self):
        """(nx+1, ny+1) bool: vertex touches at least one active element."""
        act = np.zeros((self.nx + 1, self.ny + 1), dtype=bool)
        pad = np.zeros((self.nx + 2, self.ny + 2), dtype=bool)
        pad[1:-1, 1:-1] = self.active
        for di in (0, 1):
            for dj in (0, 1):
                act |= pad[di : di + self.nx + 1, dj : dj + self.ny + 1]
        return act

    def boundary_vertex_mask(self):
        """Active vertices on the boundary of the active region."""
        pad = np.zeros((self.nx + 2, self.ny + 2), dtype=bool)
        pad[1:-1, 1:-1] = self.active
        interior = np.ones((self.nx + 1, self.ny + 1), dtype=bool)
        for di in (0, 1):
            for dj in (0, 1):
                interior &= pad[di : di + self.nx + 1, dj : dj + self.ny + 1]
        return self.vertex_active_mask() & ~interior

    def patch_vertices(self, p):
        """Lattice indices of the 6 patch vertices, row-major in patch coords."""
        patch = self.patches[p]
        i, j = self.elements[patch.elements[0]]
        if patch.orientation == HORIZONTAL:
            return (
                (i, j), (i + 1, j), (i + 2, j),
                (i, j + 1), (i + 1, j + 1), (i + 2, j + 1),
            )
        return (
            (i, j), (i + 1, j),
            (i, j + 1), (i + 1, j + 1),
            (i, j + 2), (i + 1, j + 2),
        )


def build_grid(origin, extent, n, mask=None):
    """Build a structured square grid, optionally masking elements out.

    ``mask`` is a predicate taking the element center (x, y) and returning
    True for active elements.  Raises MeshError for non-square elements and
    for empty or disconnected active regions.
    """
    nx, ny = int(n[0]), int(n[1])
    if nx < 1 or ny < 1:
        raise MeshError("element counts must be positive")
    hx = extent[0] / nx
    hy = extent[1] / ny
    if not np.isclose(hx, hy, rtol=1e-12, atol=0.0):
        raise MeshError(f"elements are not square: hx={hx} hy={hy}")
    h = hx

    active = np.ones((nx, ny), dtype=bool)
    if mask is not None:
        for i in range(nx):
            for j in range(ny):
                cx = origin[0] + (i + 0.5) * h
                cy = origin[1] + (j + 0.5) * h
                active[i, j] = bool(mask(cx, cy))
    if not active.any():
        raise MeshError("active element set is empty")
    _check_connected(active)

    grid = Grid(
        origin=(float(origin[0]), float(origin[1])),
        extent=(float(extent[0]), float(extent[1])),
        nx=nx, ny=ny, h=float(h), active=active,
    )
    _build_tables(grid)
    return grid


def _check_connected(active):
    nx, ny = active.shape
    seeds = np.argwhere(active)
    seen = np.zeros_like(active)
    stack = [tuple(seeds[0])]
    seen[tuple(seeds[0])] = True
    while stack:
        i, j = stack.pop()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ii, jj = i + di, j + dj
            if 0 <= ii < nx and 0 <= jj < ny and active[ii, jj] and not seen[ii, jj]:
                seen[ii, jj] = True
                stack.append((ii, jj))
    if seen.sum() != active.sum():
        raise MeshError("active element set is disconnected")


# edge slots of an element, by the edge the patch is attached to
SLOT_LEFT, SLOT_RIGHT, SLOT_BOTTOM, SLOT_TOP = 0, 1, 2, 3


def _build_tables(grid):
    nx, ny, active = grid.nx, grid.ny, grid.active
    elem_id = -np.ones((nx, ny), dtype=int)
    lattice = np.argwhere(active)
    elem_id[active] = np.arange(len(lattice))
    grid.elements = lattice
    grid.elem_id = elem_id

    patches = []
    elem_patches = -np.ones((len(lattice), 4), dtype=int)
    # vertical interior edges -> horizontal (side-by-side) patches
    for i in range(nx - 1):
        for j in range(ny):
            if active[i, j] and active[i + 1, j]:
                pid = len(patches)
                left, right = elem_id[i, j], elem_id[i + 1, j]
                patches.append(Patch(pid, HORIZONTAL, (left, right)))
                elem_patches[left, SLOT_RIGHT] = pid
                elem_patches[right, SLOT_LEFT] = pid
    # horizontal interior edges -> vertical (stacked) patches
    for i in range(nx):
        for j in range(ny - 1):
            if active[i, j] and active[i, j + 1]:
                pid = len(patches)
                bottom, top = elem_id[i, j], elem_id[i, j + 1]
                patches.append(Patch(pid, VERTICAL, (bottom, top)))
                elem_patches[bottom, SLOT_TOP] = pid
                elem_patches[top, SLOT_BOTTOM] = pid
    grid.patches = patches
    grid.elem_patches = elem_patches


def locate(grid, p):
    """Element containing p and its local coordinates in [0,1]^2.

    Points on internal grid lines are assigned to the larger-index element
    (half-open convention) except on the global max boundary.
    """
    x = (p[0] - grid.origin[0]) / grid.h
    y = (p[1] - grid.origin[1]) / grid.h
    tol = 1e-12 * max(grid.nx, grid.ny)
    if x < -tol or y < -tol or x > grid.nx + tol or y > grid.ny + tol:
        raise MeshError(f"point {p} outside the grid rectangle")
    i = min(int(np.floor(x)), grid.nx - 1)
    j = min(int(np.floor(y)), grid.ny - 1)
    i = max(i, 0)
    j = max(j, 0)
    if not grid.active[i, j]:
        raise MeshError(f"point {p} lies in an inactive region")
    return grid.elem_id[i, j], (x - i, y - j)


SCHEMES = ("galerkin", "supg", "rfb", "bmz")


@dataclass
class DofMap:
    """Global degree-of-freedom numbering for one scheme.

    Block order is vertices, element bubbles (4 per element), patch bubbles
    (1 per interior edge), matching the 3x3 block structure of the linear
    system.
    """

    scheme: str
    vertex_dof: np.ndarray  # (nx+1, ny+1), -1 for inactive vertices
    n_vertex_dofs: int
    n_element_bubbles: int
    n_patch_bubbles: int
    boundary_dofs: np.ndarray  # dof indices of Dirichlet vertices
    boundary_lattice: np.ndarray  # (nb, 2) lattice indices of those vertices

    @property
    def total_dofs(self):
        return self.n_vertex_dofs + self.n_element_bubbles + self.n_patch_bubbles

    @property
    def has_element_bubbles(self):
        return self.scheme in ("rfb", "bmz")

    @property
    def has_patch_bubbles(self):
        return self.scheme == "bmz"

    def element_bubble_dof(self, e, k):
        return self.n_vertex_dofs + 4 * e + k

    def patch_bubble_dof(self, p):
        return self.n_vertex_dofs + self.n_element_bubbles + p


def dof_layout(grid, scheme):
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    act = grid.vertex_active_mask()
    vertex_dof = -np.ones((grid.nx + 1, grid.ny + 1), dtype=int)
    vertex_dof[act] = np.arange(act.sum())
    bmask = grid.boundary_vertex_mask()
    boundary_lattice = np.argwhere(bmask)
    boundary_dofs = vertex_dof[bmask]
    n_eb = 4 * grid.n_elements if scheme in ("rfb", "bmz") else 0
    n_pb = grid.n_interior_edges if scheme == "bmz" else 0
    return DofMap(
        scheme=scheme,
        vertex_dof=vertex_dof,
        n_vertex_dofs=int(act.sum()),
        n_element_bubbles=n_eb,
        n_patch_bubbles=n_pb,
        boundary_dofs=boundary_dofs,
        boundary_lattice=boundary_lattice,
    )
