"""Global sparse assembly for all schemes, including bubble blocks.

The operator and mass matrices use the block layout (vertices, element
bubbles, patch bubbles).  Bubble-involving entries are copied from
stabilization tables supplied by a provider object with methods
``element_table(e)``, ``patch_table(p)`` and ``element_mean(e)``; entries in
those tables are already at physical scale.  Matrix convention:
``A[i, j] = a(basis_j, basis_i)`` (row = test function).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import q1
from .linalg import SparseMatrix
from .mesh import (
    HORIZONTAL, VERTICAL, SLOT_LEFT, SLOT_RIGHT, SLOT_BOTTOM, SLOT_TOP,
)

# patch config (orientation, half) seen from an element, by edge slot
SLOT_CONFIG = {
    SLOT_LEFT: (HORIZONTAL, 1),
    SLOT_RIGHT: (HORIZONTAL, 0),
    SLOT_BOTTOM: (VERTICAL, 1),
    SLOT_TOP: (VERTICAL, 0),
}


@dataclass
class LinearSystem:
    A: sp.csr_matrix
    rhs: np.ndarray
    constrained: dict  # dof -> imposed value


@dataclass
class MassSystem:
    M: sp.csr_matrix


def _element_vertex_dofs(grid, dofs):
    """(n_elem, 4) vertex dof ids in local ccw order."""
    i = grid.elements[:, 0]
    j = grid.elements[:, 1]
    vd = dofs.vertex_dof
    return np.stack(
        [vd[i, j], vd[i + 1, j], vd[i + 1, j + 1], vd[i, j + 1]], axis=1
    )


def _element_gauss_points(grid):
    """Physical Gauss point coordinates, each (n_elem, 4)."""
    x0 = grid.origin[0] + grid.elements[:, 0] * grid.h
    y0 = grid.origin[1] + grid.elements[:, 1] * grid.h
    gx = x0[:, None] + grid.h * q1.GAUSS_PTS[None, :, 0]
    gy = y0[:, None] + grid.h * q1.GAUSS_PTS[None, :, 1]
    return gx, gy


def _vertex_operator_entries(grid, coeffs):
    """(n_elem, 4, 4) element matrices of the bilinear form, exact Gauss."""
    h = grid.h
    if coeffs.constant_velocity:
        a1, a2 = coeffs.velocity
        E = q1.operator_element_matrix(h, coeffs.epsilon, a1, a2, coeffs.reaction)
        return np.broadcast_to(E, (grid.n_elements, 4, 4))
    gx, gy = _element_gauss_points(grid)
    a1, a2 = coeffs.velocity_at(gx, gy)
    E = np.zeros((grid.n_elements, 4, 4))
    for g in range(4):
        adv = (
            a1[:, g, None, None] * np.outer(q1.SHAPE_G[g], q1.GRADXI_G[g])
            + a2[:, g, None, None] * np.outer(q1.SHAPE_G[g], q1.GRADETA_G[g])
        )
        E += q1.GAUSS_WTS[g] * h * adv
    E += coeffs.epsilon * q1.UNIT_STIFF
    E += coeffs.reaction * h * h * q1.UNIT_MASS
    return E


def _scatter_blocks(builder, rows, cols, vals):
    r = np.repeat(rows, cols.shape[1], axis=1)
    c = np.tile(cols, (1, rows.shape[1]))
    builder.add(r, c, np.asarray(vals).reshape(r.shape[0], -1))


def _patch_vertex_dofs(grid, dofs, p):
    return np.array([dofs.vertex_dof[i, j] for i, j in grid.patch_vertices(p)])


def assemble_operator(grid, dofs, coeffs, tables=None):
    """Assemble the unconstrained operator matrix for ``dofs.scheme``."""
    _require_tables(dofs, tables)
    A = SparseMatrix(dofs.total_dofs)
    vd = _element_vertex_dofs(grid, dofs)
    _scatter_blocks(A, vd, vd, _vertex_operator_entries(grid, coeffs))
    if dofs.has_element_bubbles:
        _add_element_bubble_blocks(A, grid, dofs, tables, "A")
    if dofs.has_patch_bubbles:
        _add_patch_blocks(A, grid, dofs, tables, "A")
    return A.finalize()


def assemble_mass(grid, dofs, tables=None):
    """Assemble the unconstrained mass matrix (same block layout)."""
    _require_tables(dofs, tables)
    M = SparseMatrix(dofs.total_dofs)
    vd = _element_vertex_dofs(grid, dofs)
    Me = q1.mass_element_matrix(grid.h)
    _scatter_blocks(M, vd, vd, np.broadcast_to(Me, (grid.n_elements, 4, 4)))
    if dofs.has_element_bubbles:
        _add_element_bubble_blocks(M, grid, dofs, tables, "M")
    if dofs.has_patch_bubbles:
        _add_patch_blocks(M, grid, dofs, tables, "M")
    return M.finalize()


def _require_tables(dofs, tables):
    if dofs.has_element_bubbles and tables is None:
        raise ValueError(f"scheme {dofs.scheme!r} needs stabilization tables")


def _element_bubble_dofs(dofs, n_elem):
    base = dofs.n_vertex_dofs
    return base + 4 * np.arange(n_elem)[:, None] + np.arange(4)[None, :]


def _add_element_bubble_blocks(builder, grid, dofs, tables, which):
    vd = _element_vertex_dofs(grid, dofs)
    bd = _element_bubble_dofs(dofs, grid.n_elements)
    if tables.uniform:
        t = tables.element_table(0)
        n = grid.n_elements
        if which == "A":
            bb = np.broadcast_to(t.A_bb, (n, 4, 4))
            bphi = np.broadcast_to(t.A_bphi, (n, 4, 4))
            phib = np.broadcast_to(t.A_phib, (n, 4, 4))
        else:
            bb = np.broadcast_to(t.M_bb, (n, 4, 4))
            bphi = np.broadcast_to(t.M_bphi, (n, 4, 4))
            phib = np.broadcast_to(np.transpose(t.M_bphi), (n, 4, 4))
        _scatter_blocks(builder, bd, bd, bb)
        _scatter_blocks(builder, bd, vd, bphi)
        _scatter_blocks(builder, vd, bd, phib)
        return
    for e in range(grid.n_elements):
        t = tables.element_table(e)
        if which == "A":
            bb, bphi, phib = t.A_bb, t.A_bphi, t.A_phib
        else:
            bb, bphi, phib = t.M_bb, t.M_bphi, t.M_bphi.T
        _scatter_blocks(builder, bd[e : e + 1], bd[e : e + 1], bb[None])
        _scatter_blocks(builder, bd[e : e + 1], vd[e : e + 1], bphi[None])
        _scatter_blocks(builder, vd[e : e + 1], bd[e : e + 1], phib[None])


def _patch_meta(grid, dofs):
    """Batched per-orientation patch arrays: (pids, s, pv, elems)."""
    pb0 = dofs.n_vertex_dofs + dofs.n_element_bubbles
    out = {}
    for orient in (HORIZONTAL, VERTICAL):
        pids = np.array(
            [p for p, patch in enumerate(grid.patches)
             if patch.orientation == orient],
            dtype=np.int64,
        )
        pv = np.array(
            [[dofs.vertex_dof[i, j] for i, j in grid.patch_vertices(p)]
             for p in pids],
            dtype=np.int64,
        ).reshape(pids.size, 6)
        elems = np.array(
            [grid.patches[p].elements for p in pids], dtype=np.int64
        ).reshape(pids.size, 2)
        out[orient] = (pids, pb0 + pids, pv, elems)
    return out


def _add_patch_blocks_uniform(builder, grid, dofs, tables, which):
    """Batched patch-block scatter when one table serves every patch."""
    bd = _element_bubble_dofs(dofs, grid.n_elements)
    pb0 = dofs.n_vertex_dofs + dofs.n_element_bubbles
    t = tables.patch_table(0)
    for orient, (pids, s, pv, elems) in _patch_meta(grid, dofs).items():
        if pids.size == 0:
            continue
        blk = t.patch[orient]
        if which == "A":
            ss, sphi, phis = blk.A_ss, blk.A_sphi, blk.A_phis
            sb, bs = blk.A_sb, blk.A_bs
        else:
            ss, sphi, phis = blk.M_ss, blk.M_sphi, blk.M_sphi
            sb = bs = blk.M_sb
        n = pids.size
        builder.add(s, s, np.full(n, ss))
        builder.add(np.repeat(s, 6), pv, np.tile(sphi, n))
        builder.add(pv, np.repeat(s, 6), np.tile(phis, n))
        for half in (0, 1):
            eb = bd[elems[:, half]]
            builder.add(np.repeat(s, 4), eb, np.tile(sb[half], n))
            builder.add(eb, np.repeat(s, 4), np.tile(bs[half], n))
    ep = grid.elem_patches
    for slot_r in range(4):
        for slot_c in range(4):
            if slot_c == slot_r:
                continue
            mask = (ep[:, slot_r] >= 0) & (ep[:, slot_c] >= 0)
            if not mask.any():
                continue
            val = _cross_entry(
                t, which, SLOT_CONFIG[slot_r], SLOT_CONFIG[slot_c]
            )
            rows = pb0 + ep[mask, slot_r]
            cols = pb0 + ep[mask, slot_c]
            builder.add(rows, cols, np.full(rows.size, val))


def _add_patch_blocks_element(builder, grid, dofs, tables, which):
    """Per-element patch assembly for variable velocity.

    Every entry supported on (or restricted to) element T is taken from
    T's own frozen-velocity table: the patch-bubble diagonal and
    patch-vertex couplings are summed from the two half-restricted
    entries, bubble-bubble couplings live entirely in one element, and
    couplings of two patches use the shared element's table.  Each
    element then contributes a self-consistent local block, which keeps
    the assembled mass matrix positive semidefinite.
    """
    bd = _element_bubble_dofs(dofs, grid.n_elements)
    for p, patch in enumerate(grid.patches):
        s = dofs.patch_bubble_dof(p)
        pv = _patch_vertex_dofs(grid, dofs, p)
        for half in (0, 1):
            e = patch.elements[half]
            blk = tables.element_table(e).patch[patch.orientation]
            if which == "A":
                builder.add([s], [s], [blk.A_ss_half[half]])
                builder.add(np.full(6, s), pv, blk.A_sphi_half[half])
                builder.add(pv, np.full(6, s), blk.A_phis_half[half])
                sb, bs = blk.A_sb[half], blk.A_bs[half]
            else:
                builder.add([s], [s], [blk.M_ss_half[half]])
                builder.add(np.full(6, s), pv, blk.M_sphi_half[half])
                builder.add(pv, np.full(6, s), blk.M_sphi_half[half])
                sb = bs = blk.M_sb[half]
            eb = bd[e]
            builder.add(np.full(4, s), eb, sb)
            builder.add(eb, np.full(4, s), bs)
    for e in range(grid.n_elements):
        slots = [
            (slot, pid)
            for slot, pid in enumerate(grid.elem_patches[e])
            if pid >= 0
        ]
        t = tables.element_table(e)
        for slot_r, pid_r in slots:
            cfg_r = SLOT_CONFIG[slot_r]
            for slot_c, pid_c in slots:
                if pid_c == pid_r:
                    continue
                builder.add(
                    [dofs.patch_bubble_dof(pid_r)],
                    [dofs.patch_bubble_dof(pid_c)],
                    [_cross_entry(t, which, cfg_r, SLOT_CONFIG[slot_c])],
                )


def _add_patch_blocks(builder, grid, dofs, tables, which):
    if tables.uniform:
        _add_patch_blocks_uniform(builder, grid, dofs, tables, which)
        return
    if getattr(tables, "per_element", False):
        _add_patch_blocks_element(builder, grid, dofs, tables, which)
        return
    bd = _element_bubble_dofs(dofs, grid.n_elements)
    for p, patch in enumerate(grid.patches):
        t = tables.patch_table(p)
        blk = t.patch[patch.orientation]
        s = dofs.patch_bubble_dof(p)
        pv = _patch_vertex_dofs(grid, dofs, p)
        if which == "A":
            builder.add([s], [s], [blk.A_ss])
            builder.add(np.full(6, s), pv, blk.A_sphi)
            builder.add(pv, np.full(6, s), blk.A_phis)
            sb, bs = blk.A_sb, blk.A_bs
        else:
            builder.add([s], [s], [blk.M_ss])
            builder.add(np.full(6, s), pv, blk.M_sphi)
            builder.add(pv, np.full(6, s), blk.M_sphi)
            sb = bs = blk.M_sb
        for half in (0, 1):
            eb = bd[patch.elements[half]]
            builder.add(np.full(4, s), eb, sb[half])
            builder.add(eb, np.full(4, s), bs[half])
    # coupling of two patches sharing one element
    for e in range(grid.n_elements):
        slots = [
            (slot, pid)
            for slot, pid in enumerate(grid.elem_patches[e])
            if pid >= 0
        ]
        for slot_r, pid_r in slots:
            t = tables.patch_table(pid_r)
            cfg_r = SLOT_CONFIG[slot_r]
            for slot_c, pid_c in slots:
                if pid_c == pid_r:
                    continue
                cfg_c = SLOT_CONFIG[slot_c]
                builder.add(
                    [dofs.patch_bubble_dof(pid_r)],
                    [dofs.patch_bubble_dof(pid_c)],
                    [_cross_entry(t, which, cfg_r, cfg_c)],
                )


def _cross_entry(t, which, cfg_r, cfg_c):
    d = t.cross_A if which == "A" else t.cross_M
    return d[(cfg_r, cfg_c)]


def assemble_load(grid, dofs, coeffs, tables=None, time=None):
    """Load vector (f, test) for all blocks; bubble loads use f-bar * int(b)."""
    _require_tables(dofs, tables)
    rhs = np.zeros(dofs.total_dofs)
    gx, gy = _element_gauss_points(grid)
    fg = np.broadcast_to(coeffs.source_at(gx, gy), gx.shape)
    vd = _element_vertex_dofs(grid, dofs)
    h2 = grid.h * grid.h
    load = h2 * np.einsum("eg,gi->ei", fg * q1.GAUSS_WTS[None, :], q1.SHAPE_G)
    np.add.at(rhs, vd, load)
    fbar = fg @ q1.GAUSS_WTS
    if dofs.has_element_bubbles:
        bd = _element_bubble_dofs(dofs, grid.n_elements)
        if tables.uniform:
            intb = tables.element_table(0).int_b
            rhs[bd] += fbar[:, None] * intb[None, :]
        else:
            for e in range(grid.n_elements):
                rhs[bd[e]] += fbar[e] * tables.element_table(e).int_b
    if dofs.has_patch_bubbles:
        if getattr(tables, "per_element", False):
            # Per-element patch assembly: each half's load comes from that
            # element's own table so that the load stays consistent with the
            # mass rows (the six patch hats sum to 1, so the half-restricted
            # integral of the patch bubble is the row sum of M_sphi_half).
            for p, patch in enumerate(grid.patches):
                s = dofs.patch_bubble_dof(p)
                for half in (0, 1):
                    e = patch.elements[half]
                    blk = tables.element_table(e).patch[patch.orientation]
                    rhs[s] += fbar[e] * blk.M_sphi_half[half].sum()
        else:
            for p, patch in enumerate(grid.patches):
                blk = tables.patch_table(p).patch[patch.orientation]
                fpatch = 0.5 * (fbar[patch.elements[0]] + fbar[patch.elements[1]])
                rhs[dofs.patch_bubble_dof(p)] += fpatch * blk.int_s
    return rhs


def apply_dirichlet(A, rhs, grid, dofs, gdata):
    """Replace boundary-vertex rows by identity rows with rhs = g(vertex).

    Bubble rows are never constrained.  Returns a LinearSystem.
    """
    bl = dofs.boundary_lattice
    x = grid.origin[0] + bl[:, 0] * grid.h
    y = grid.origin[1] + bl[:, 1] * grid.h
    gvals = np.broadcast_to(np.asarray(gdata.at(x, y), dtype=float), x.shape)
    if gvals.shape != (len(bl),):
        raise ValueError("boundary data not evaluable at boundary vertices")
    free = np.ones(dofs.total_dofs)
    free[dofs.boundary_dofs] = 0.0
    ident = np.zeros(dofs.total_dofs)
    ident[dofs.boundary_dofs] = 1.0
    Ad = (sp.diags(free) @ A + sp.diags(ident)).tocsr()
    rhs = np.array(rhs, dtype=float)
    rhs[dofs.boundary_dofs] = gvals
    return LinearSystem(Ad, rhs, dict(zip(dofs.boundary_dofs.tolist(), gvals)))


def assemble_supg(grid, dofs, coeffs, tau_rule="classic", tables=None):
    """Vertex-only SUPG operator and load with the chosen tau per element.

    ``classic``: tau = h / (2 |a|) on elements with Pe >= 1, else 0.
    ``rfb-integral``: tau = (sum_i int(b_i)) / h^2 from the element table.
    """
    if dofs.scheme != "supg":
        raise ValueError("assemble_supg needs a supg dof layout")
    if tau_rule not in ("classic", "rfb-integral"):
        raise ValueError(f"unknown tau rule {tau_rule!r}")
    if tau_rule == "rfb-integral" and tables is None:
        raise ValueError("rfb-integral tau needs stabilization tables")
    h = grid.h
    A = SparseMatrix(dofs.total_dofs)
    vd = _element_vertex_dofs(grid, dofs)
    E = np.array(_vertex_operator_entries(grid, coeffs))
    rhs = np.zeros(dofs.total_dofs)
    gx, gy = _element_gauss_points(grid)
    fg = np.broadcast_to(coeffs.source_at(gx, gy), gx.shape)
    load = h * h * np.einsum(
        "eg,gi->ei", fg * q1.GAUSS_WTS[None, :], q1.SHAPE_G
    )
    warned = False
    for e in range(grid.n_elements):
        a1, a2 = (
            coeffs.velocity
            if coeffs.constant_velocity
            else tables_mean(tables, coeffs, grid, e)
        )
        amag = float(np.hypot(a1, a2))
        if tau_rule == "classic":
            if amag == 0.0:
                if not warned:
                    warnings.warn(
                        "classic SUPG tau undefined for a = 0; "
                        "falling back to Galerkin", stacklevel=2,
                    )
                    warned = True
                continue
            pe = amag * h / coeffs.epsilon
            if pe < 1.0:
                continue
            tau = h / (2.0 * amag)
        else:
            tau = float(tables.element_table(e).int_b.sum()) / (h * h)
        E[e] = E[e] + q1.supg_element_matrix(h, a1, a2, coeffs.reaction, tau)
        agrad = np.zeros((4, 4))  # (gauss, node): a.grad N at gauss pts
        for g in range(4):
            agrad[g] = (a1 * q1.GRADXI_G[g] + a2 * q1.GRADETA_G[g]) / h
        load[e] += tau * h * h * np.einsum(
            "g,g,gi->i", q1.GAUSS_WTS, fg[e], agrad
        )
    _scatter_blocks(A, vd, vd, E)
    np.add.at(rhs, vd, load)
    return A.finalize(), rhs


def tables_mean(tables, coeffs, grid, e):
    if tables is not None:
        return tables.element_mean(e)
    from .problem import element_mean_velocity

    return element_mean_velocity(coeffs, grid.element_origin(e), grid.h)
