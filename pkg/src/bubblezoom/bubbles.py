"""Recursive bubble engine.

Local bubble problems are solved on reference domains -- the unit square for
element bubbles, (0,2)x(0,1) and (0,1)x(0,2) for the two patch orientations --
on a uniform fine grid with M cells per unit length.  When the fine grid is
itself advection-dominated, the fine solves use the stabilized discretization
whose tables come from a recursive call at the next zoom level.  All pairings
of the resulting bubbles are collected into a StabTable and scaled back to the
physical element size.

Scaling conventions (element size h, reference size 1, hats = reference
quantities): coefficients map to (eps/h, a, h*c); a bubble psi at physical
scale is h*B(x/h) where B solves the reference problem; thus
a(psi, psi') = h^3 * a_ref(B, B'), a(phi, psi) = h^2 * a_ref(phi_hat, B),
(psi, psi') = h^4, (psi, phi) = h^3, int(psi) = h^3 * int(B).

Tables are cached at reference scale, keyed by a canonical velocity
orientation: (p, q) = sorted(|a1|, |a2|) descending.  Tables for the other
seven orientations are exact index permutations / array flips of the
canonical one, so the cache is shared across the symmetry group of the
square.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import assembly, q1
from .linalg import SolveError, factorize
from .mesh import (
    HORIZONTAL,
    SLOT_BOTTOM,
    SLOT_LEFT,
    SLOT_RIGHT,
    SLOT_TOP,
    VERTICAL,
    build_grid,
    dof_layout,
)
from .problem import BoundaryData, Coefficients

ELEMENT = "element"
GEOMETRIES = (ELEMENT, HORIZONTAL, VERTICAL)

# patch configs relative to a shared element: (orientation, half index)
_CONFIGS = (
    (HORIZONTAL, 0), (HORIZONTAL, 1), (VERTICAL, 0), (VERTICAL, 1),
)

_ZERO_BC = BoundaryData(0.0)


@dataclass(frozen=True)
class ScaledCoefficients:
    """Reference-domain coefficients representing one zoom level."""

    eps_hat: float
    a_hat: tuple
    c_hat: float
    level: int = 0
    physical_h: float = 1.0

    @property
    def fine_peclet(self):
        """Cell Peclet of the M-refined reference grid, per unit M."""
        return float(np.hypot(*self.a_hat) / self.eps_hat)


def rescale(coeffs, h, level=0):
    """Map (eps, a, c) on an element of size h to reference size 1.

    The correspondence is a_phys(u, v) = h * a_ref(u_hat, v_hat) with
    coefficients (eps/h, a, h*c); the Peclet number is preserved.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    a1, a2 = coeffs.velocity
    return ScaledCoefficients(
        eps_hat=coeffs.epsilon / h,
        a_hat=(float(a1), float(a2)),
        c_hat=coeffs.reaction * h,
        level=level,
        physical_h=h,
    )


def recursion_depth(pe_h, M):
    """Smallest d >= 0 with pe_h / M**d < 1 (strict)."""
    if M < 2:
        raise ValueError("M must be at least 2")
    d = 0
    pe = float(pe_h)
    while pe >= 1.0:
        pe /= M
        d += 1
    return d


def refine_patch(geometry, M):
    """Uniform fine grid of squares of side 1/M on a reference domain."""
    if M < 2:
        raise ValueError("M must be at least 2")
    if geometry == ELEMENT:
        return build_grid((0.0, 0.0), (1.0, 1.0), (M, M))
    if geometry == HORIZONTAL:
        return build_grid((0.0, 0.0), (2.0, 1.0), (2 * M, M))
    if geometry == VERTICAL:
        return build_grid((0.0, 0.0), (1.0, 2.0), (M, 2 * M))
    raise ValueError(f"unknown geometry class {geometry!r}")


@dataclass
class FineField:
    """Nodal values of a bubble on a reference fine lattice.

    values has shape (nx+1, ny+1), axis 0 = x; the field is the piecewise
    bilinear interpolant and is zero on the domain boundary.
    """

    grid: object
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expect = (self.grid.nx + 1, self.grid.ny + 1)
        if self.values.shape != expect:
            raise ValueError(f"field shape {self.values.shape} != {expect}")


@dataclass
class PatchBlock:
    """Stabilization entries of one patch bubble orientation."""

    A_ss: float
    A_sphi: np.ndarray  # (6,)  a(phi_j, b_S)
    A_phis: np.ndarray  # (6,)  a(b_S, phi_i)
    A_sb: np.ndarray    # (2, 4)  a(b_T^i, b_S), per element half
    A_bs: np.ndarray    # (2, 4)  a(b_S, b_T^i)
    M_ss: float
    M_sphi: np.ndarray  # (6,)
    M_sb: np.ndarray    # (2, 4)
    int_s: float
    # pairings restricted to one element half, consumed one recursion level
    # up to represent this level's bubbles exactly in restricted integrals
    A_ss_half: np.ndarray = None    # (2,)  a(b_S, b_S)|half
    A_sphi_half: np.ndarray = None  # (2, 6)  a(phi_j, b_S)|half
    A_phis_half: np.ndarray = None  # (2, 6)  a(b_S, phi_i)|half
    M_ss_half: np.ndarray = None    # (2,)
    M_sphi_half: np.ndarray = None  # (2, 6)


@dataclass
class StabTable:
    """All bubble pairings for one coefficient set at one physical size.

    Element block indices: A_bb[i, j] = a(b_j, b_i); A_bphi[i, j] =
    a(phi_j, b_i); A_phib[i, j] = a(b_j, phi_i); M_* analogous; int_b[i] =
    integral of b_i.  patch maps orientation -> PatchBlock; cross_A/cross_M
    map ordered pairs of patch configs (orientation, half) sharing one
    element to a(b_col, b_row) restricted to that element.

    fields_b holds the 4 element-bubble lattice fields ((4, M+1, M+1)) and
    fields_s the patch-bubble field per orientation, both at the table's
    physical scale (a physical bubble is h times the reference solution),
    for pointwise evaluation of solutions.
    """

    eps: float
    a: tuple
    c: float
    h: float
    M: int
    depth: int
    int_b: np.ndarray
    A_bb: np.ndarray
    A_bphi: np.ndarray
    A_phib: np.ndarray
    M_bb: np.ndarray
    M_bphi: np.ndarray
    patch: dict
    cross_A: dict
    cross_M: dict
    fields_b: np.ndarray = None
    fields_s: dict = None

    def scaled(self, h):
        """Same table mapped to physical element size h (from size self.h)."""
        r = h / self.h
        r2, r3, r4 = r * r, r**3, r**4
        patch = {
            o: PatchBlock(
                A_ss=b.A_ss * r3, A_sphi=b.A_sphi * r2, A_phis=b.A_phis * r2,
                A_sb=b.A_sb * r3, A_bs=b.A_bs * r3, M_ss=b.M_ss * r4,
                M_sphi=b.M_sphi * r3, M_sb=b.M_sb * r4, int_s=b.int_s * r3,
                A_ss_half=b.A_ss_half * r3,
                A_sphi_half=b.A_sphi_half * r2,
                A_phis_half=b.A_phis_half * r2,
                M_ss_half=b.M_ss_half * r4,
                M_sphi_half=b.M_sphi_half * r3,
            )
            for o, b in self.patch.items()
        }
        return replace(
            self,
            eps=self.eps / r, c=self.c * r, h=h,
            int_b=self.int_b * r3,
            A_bb=self.A_bb * r3, A_bphi=self.A_bphi * r2,
            A_phib=self.A_phib * r2,
            M_bb=self.M_bb * r4, M_bphi=self.M_bphi * r3,
            patch=patch,
            cross_A={k: v * r3 for k, v in self.cross_A.items()},
            cross_M={k: v * r4 for k, v in self.cross_M.items()},
            fields_b=None if self.fields_b is None else self.fields_b * r,
            fields_s=None if self.fields_s is None else {
                o: f * r for o, f in self.fields_s.items()
            },
        )


def pyramid_integral(a, h):
    """Closed-form integral over a size-h square of the travel-time bubble.

    The bubble solves a.grad(b) = 1 with b = 0 on the inflow boundary; with
    p = max(|a1|, |a2|), q = min: integral = h^3 (1/(2p) - q/(6 p^2)).
    """
    p = max(abs(a[0]), abs(a[1]))
    q = min(abs(a[0]), abs(a[1]))
    if p == 0:
        raise ValueError("pyramid bubble undefined for a = 0")
    return h**3 * (1.0 / (2.0 * p) - q / (6.0 * p * p))


def pair(form, u, v, sc):
    """Quadrature pairing of two fine fields on the same lattice.

    form is "ard" (the advection-diffusion-reaction bilinear form, u trial
    and v test, with coefficients frozen to sc) or "mass".
    """
    gu, fu = (u.grid, u.values) if isinstance(u, FineField) else (None, u)
    gv, fv = (v.grid, v.values) if isinstance(v, FineField) else (None, v)
    if np.shape(fu) != np.shape(fv):
        raise ValueError("pair needs fields on a common lattice")
    if gu is not None and gv is not None and gu.h != gv.h:
        raise ValueError("pair needs fields on a common lattice")
    s = gu.h if gu is not None else gv.h
    if form == "mass":
        return q1.mass_pair_fields(fu, fv, s)
    if form == "ard":
        a1, a2 = sc.a_hat
        return q1.pair_fields(fu, fv, s, sc.eps_hat, a1, a2, sc.c_hat)
    raise ValueError(f"unknown form {form!r}")


# ---------------------------------------------------------------------------
# local fine solves


def _reference_coeffs(sc):
    return Coefficients(
        epsilon=sc.eps_hat, velocity=sc.a_hat, reaction=sc.c_hat
    )


class _LocalSolve:
    """Discrete local problem on a refined reference domain.

    Holds the unconstrained operator and mass matrices together with the
    factorized Dirichlet system, so that bilinear-form and mass pairings of
    local solutions can be evaluated as exact matrix-vector products in the
    fine discrete space (including bubble coefficients), instead of
    re-integrating boundary-layer nodal fields on the coarse lattice.
    """

    def __init__(self, sc, grid, stab):
        scheme = "galerkin" if stab is None else "bmz"
        coeffs = _reference_coeffs(sc)
        tables = None if stab is None else ConstantTables(stab)
        self.grid = grid
        self.dofs = dof_layout(grid, scheme)
        self.A = assembly.assemble_operator(grid, self.dofs, coeffs, tables)
        self.M = assembly.assemble_mass(grid, self.dofs, tables)
        self.vmask = self.dofs.vertex_dof >= 0
        free = np.ones(self.dofs.total_dofs)
        free[self.dofs.boundary_dofs] = 0.0
        Ad = (sp.diags(free) @ self.A + sp.diags(1.0 - free)).tocsr()
        try:
            self._lu = factorize(Ad)
        except SolveError as err:
            raise SolveError(
                f"fine bubble solve failed at zoom level {sc.level}: {err}"
            ) from err

    def lift(self, lattice):
        """Full coefficient vector of a fine bilinear nodal field."""
        r = np.zeros(self.dofs.total_dofs)
        r[self.dofs.vertex_dof[self.vmask]] = np.asarray(lattice)[self.vmask]
        return r

    def lattice(self, x):
        """Nodal lattice array of the bilinear part of a coefficient vector."""
        vals = np.zeros((self.grid.nx + 1, self.grid.ny + 1))
        nv = self.dofs.n_vertex_dofs
        vals[self.vmask] = x[:nv][self.dofs.vertex_dof[self.vmask]]
        return vals

    def solve(self, rhs_field):
        """Solve with homogeneous boundary values for a nodal rhs field.

        Returns (x, values): the full coefficient vector and its nodal
        lattice.
        """
        b = self.M @ self.lift(rhs_field)
        bc = np.array(b)
        bc[self.dofs.boundary_dofs] = 0.0
        x = self._lu(bc)
        return x, self.lattice(x)

    def a_pair(self, trial, test):
        """a(trial, test) for full coefficient vectors."""
        return float(test @ (self.A @ trial))

    def m_pair(self, trial, test):
        """(trial, test) for full coefficient vectors."""
        return float(test @ (self.M @ trial))


def solve_local(sc, submesh, rhs, stab=None):
    """Solve one local bubble problem with homogeneous boundary values.

    rhs is a nodal lattice array (a bilinear nodal function or the constant
    1); the bilinear nodal part of the solution is returned as a FineField.
    """
    ls = _LocalSolve(sc, submesh, stab)
    _, vals = ls.solve(np.asarray(rhs, dtype=float))
    return FineField(submesh, vals)


def _element_hat_fields(M):
    """Nodal lattice values of the 4 corner hats of the unit square."""
    x = np.linspace(0.0, 1.0, M + 1)
    X, Y = x[:, None], x[None, :]
    return [
        (1 - X) * (1 - Y), X * (1 - Y), X * Y, (1 - X) * Y,
    ]


def _patch_hat_fields(orientation, M):
    """Nodal values of the 6 vertex hats of a 2-element patch, row-major."""
    if orientation == HORIZONTAL:
        xs = np.linspace(0.0, 2.0, 2 * M + 1)
        ys = np.linspace(0.0, 1.0, M + 1)
        xcorners, ycorners = (0.0, 1.0, 2.0), (0.0, 1.0)
    else:
        xs = np.linspace(0.0, 1.0, M + 1)
        ys = np.linspace(0.0, 2.0, 2 * M + 1)
        xcorners, ycorners = (0.0, 1.0), (0.0, 1.0, 2.0)
    fields = []
    for yc in ycorners:
        hy = np.clip(1.0 - np.abs(ys - yc), 0.0, 1.0)
        for xc in xcorners:
            hx = np.clip(1.0 - np.abs(xs - xc), 0.0, 1.0)
            fields.append(hx[:, None] * hy[None, :])
    return fields


def _restrict(orientation, half, values, M):
    """Restriction of a patch lattice field to one element half."""
    if orientation == HORIZONTAL:
        return values[: M + 1, :] if half == 0 else values[M:, :]
    return values[:, : M + 1] if half == 0 else values[:, M:]


def _restrict_coeffs(E, P, orientation, half, x):
    """Element-grid coefficient vector of a patch solution on one half.

    Copies vertex values and the coefficients of fine bubbles whose support
    lies inside the half; fine patch bubbles straddling the coarse shared
    edge have no element-grid counterpart and are dropped.
    """
    gE, gP, dE, dP = E.grid, P.grid, E.dofs, P.dofs
    m = gE.nx
    offx = m if (orientation == HORIZONTAL and half == 1) else 0
    offy = m if (orientation == VERTICAL and half == 1) else 0
    y = np.zeros(dE.total_dofs)
    vP = dP.vertex_dof[offx : offx + m + 1, offy : offy + m + 1]
    y[dE.vertex_dof.ravel()] = x[vP.ravel()]
    if not dE.has_element_bubbles:
        return y
    eE = gE.elem_id.ravel()
    eP = gP.elem_id[offx : offx + m, offy : offy + m].ravel()
    for k in range(4):
        y[dE.n_vertex_dofs + 4 * eE + k] = x[dP.n_vertex_dofs + 4 * eP + k]
    if dE.has_patch_bubbles:
        for e_elem, e_patch in zip(eE, eP):
            for slot in (SLOT_RIGHT, SLOT_TOP):
                pid = gE.elem_patches[e_elem, slot]
                if pid >= 0:
                    pid_p = gP.elem_patches[e_patch, slot]
                    y[dE.patch_bubble_dof(pid)] = x[dP.patch_bubble_dof(pid_p)]
    return y


# config of the patch occupying a given slot of a cell, relative to that cell
_SLOT_CFG = {
    SLOT_LEFT: (HORIZONTAL, 1),
    SLOT_RIGHT: (HORIZONTAL, 0),
    SLOT_BOTTOM: (VERTICAL, 1),
    SLOT_TOP: (VERTICAL, 0),
}


def _straddle_cell(cfg, k, M):
    """Element-grid cell covered by the k-th straddling fine patch."""
    o, half = cfg
    if o == HORIZONTAL:
        return (M - 1, k) if half == 0 else (0, k)
    return (k, M - 1) if half == 0 else (k, 0)


def _straddle_nodes(cfg, k, M):
    """(patch vertex v, element-grid node) pairs of the in-element half."""
    o, half = cfg
    pairs = []
    if o == HORIZONTAL:
        xcs = (0, 1) if half == 0 else (1, 2)
        for yc in (0, 1):
            for xc in xcs:
                x = M - 1 + xc if half == 0 else xc - 1
                pairs.append((yc * 3 + xc, (x, k + yc)))
    else:
        ycs = (0, 1) if half == 0 else (1, 2)
        for yc in ycs:
            for xc in (0, 1):
                y = M - 1 + yc if half == 0 else yc - 1
                pairs.append((yc * 2 + xc, (k + xc, y)))
    return pairs


def _ext_matrices(E, stab):
    """Extend the element matrices by dofs for straddling fine bubbles.

    A patch solution restricted to one element carries fine patch bubbles
    that straddle the element boundary; their in-element halves are not in
    the element-grid space.  Appending one dof per straddling bubble (M per
    element edge) and filling its couplings from the inner table's per-half
    entries yields matrices for which every pairing of restricted fields is
    an exact matrix-vector product.  Returns (A_ext, M_ext, n_ext).
    """
    base = E.dofs.total_dofs
    if stab is None:
        return E.A.tocsr(), E.M.tocsr(), base
    gE, dE = E.grid, E.dofs
    M = gE.nx
    n = base + 4 * M
    EA, EM = E.A.tocoo(), E.M.tocoo()
    ar, ac, av = [EA.row], [EA.col], [EA.data]
    mr, mc, mv = [EM.row], [EM.col], [EM.data]

    def put_a(r, c, val):
        ar.append(r), ac.append(c), av.append(val)

    def put_m(r, c, val):
        mr.append(r), mc.append(c), mv.append(val)

    by_cell = {}
    for ci, cfg in enumerate(_CONFIGS):
        o, half = cfg
        blk = stab.patch[o]
        for k in range(M):
            s = base + ci * M + k
            cell = _straddle_cell(cfg, k, M)
            e = gE.elem_id[cell]
            by_cell.setdefault(cell, []).append((s, cfg))
            put_a(s, s, blk.A_ss_half[half])
            put_m(s, s, blk.M_ss_half[half])
            for v, node in _straddle_nodes(cfg, k, M):
                vd = dE.vertex_dof[node]
                put_a(s, vd, blk.A_sphi_half[half, v])
                put_a(vd, s, blk.A_phis_half[half, v])
                put_m(s, vd, blk.M_sphi_half[half, v])
                put_m(vd, s, blk.M_sphi_half[half, v])
            for i in range(4):
                bd = dE.n_vertex_dofs + 4 * e + i
                put_a(s, bd, blk.A_sb[half, i])
                put_a(bd, s, blk.A_bs[half, i])
                put_m(s, bd, blk.M_sb[half, i])
                put_m(bd, s, blk.M_sb[half, i])
            for slot, cfg_p in _SLOT_CFG.items():
                pid = gE.elem_patches[e, slot]
                if pid < 0:
                    continue
                pd = dE.patch_bubble_dof(pid)
                put_a(s, pd, stab.cross_A[(cfg, cfg_p)])
                put_a(pd, s, stab.cross_A[(cfg_p, cfg)])
                put_m(s, pd, stab.cross_M[(cfg, cfg_p)])
                put_m(pd, s, stab.cross_M[(cfg_p, cfg)])
    for entries in by_cell.values():
        if len(entries) == 2:
            (s1, c1), (s2, c2) = entries
            put_a(s1, s2, stab.cross_A[(c1, c2)])
            put_a(s2, s1, stab.cross_A[(c2, c1)])
            put_m(s1, s2, stab.cross_M[(c1, c2)])
            put_m(s2, s1, stab.cross_M[(c2, c1)])

    def build(rows, cols, vals):
        return sp.coo_matrix(
            (
                np.concatenate([np.atleast_1d(v) for v in vals]),
                (
                    np.concatenate([np.atleast_1d(r) for r in rows]),
                    np.concatenate([np.atleast_1d(c) for c in cols]),
                ),
            ),
            shape=(n, n),
        ).tocsr()

    return build(ar, ac, av), build(mr, mc, mv), n


def _restrict_ext(E, P, orientation, half, x, n_ext):
    """Extended coefficient vector of a patch solution on one half."""
    y = np.zeros(n_ext)
    y[: E.dofs.total_dofs] = _restrict_coeffs(E, P, orientation, half, x)
    if n_ext == E.dofs.total_dofs:
        return y
    gP, dP = P.grid, P.dofs
    M = E.grid.nx
    ci = _CONFIGS.index((orientation, half))
    base = E.dofs.total_dofs
    for k in range(M):
        if orientation == HORIZONTAL:
            pid = gP.elem_patches[gP.elem_id[M - 1, k], SLOT_RIGHT]
        else:
            pid = gP.elem_patches[gP.elem_id[k, M - 1], SLOT_TOP]
        y[base + ci * M + k] = x[dP.patch_bubble_dof(pid)]
    return y


def _extend(x, n_ext):
    y = np.zeros(n_ext)
    y[: x.size] = x
    return y


def _compute_reference(sc, M, cache):
    """StabTable at reference scale (h=1) for canonical velocity sc.a_hat."""
    fine_pe = sc.fine_peclet / M
    stab = None
    depth = 1
    if fine_pe >= 1.0:
        inner = _get_reference(
            ScaledCoefficients(
                eps_hat=sc.eps_hat * M,
                a_hat=sc.a_hat,
                c_hat=sc.c_hat / M,
                level=sc.level + 1,
            ),
            M,
            cache,
        )
        stab = inner.scaled(1.0 / M)
        depth = inner.depth + 1
    # Every table entry is an exact matrix-vector product in the fine
    # discrete space (bubble coefficients included): whole-domain pairings
    # use the unconstrained local matrices directly, and pairings
    # restricted to one element half of a patch use the element matrices
    # extended by the straddling fine bubbles (see _ext_matrices).  The
    # per-half entries that feed those extended matrices are in turn
    # produced here one level down, telescoping to the unstabilized base
    # case where restriction is trivially exact.
    elem_grid = refine_patch(ELEMENT, M)
    hats = _element_hat_fields(M)
    E = _LocalSolve(sc, elem_grid, stab)
    d = [E.lift(h) for h in hats]
    sols = [E.solve(h) for h in hats]
    xs = [x for x, _ in sols]
    B = [vals for _, vals in sols]
    ones_e = E.lift(np.ones((M + 1, M + 1)))
    M_bphi = np.array(
        [[E.m_pair(d[j], xs[i]) for j in range(4)] for i in range(4)]
    )
    A_bb = M_bphi.copy()  # a(b_j, b_i) = (phi_j, b_i) = M_bphi[i, j]
    A_bphi = np.array(
        [[E.a_pair(d[j], xs[i]) for j in range(4)] for i in range(4)]
    )
    A_phib = np.array(
        [[E.a_pair(xs[j], d[i]) for j in range(4)] for i in range(4)]
    )
    M_bb = np.array(
        [[E.m_pair(xs[j], xs[i]) for j in range(4)] for i in range(4)]
    )
    int_b = np.array([E.m_pair(x, ones_e) for x in xs])

    Ax, Mx, n_ext = _ext_matrices(E, stab)

    def apair(trial, test):
        return float(test @ (Ax @ trial))

    def mpair(trial, test):
        return float(test @ (Mx @ trial))

    xs_ext = [_extend(x, n_ext) for x in xs]
    patch = {}
    S = {}
    yext = {}
    for o in (HORIZONTAL, VERTICAL):
        grid = refine_patch(o, M)
        ones = np.ones((grid.nx + 1, grid.ny + 1))
        P = _LocalSolve(sc, grid, stab)
        x_s, S[o] = P.solve(ones)
        phats = _patch_hat_fields(o, M)
        p = [P.lift(ph) for ph in phats]
        ones_p = P.lift(ones)
        int_s = P.m_pair(x_s, ones_p)
        sb = np.zeros((2, 4))
        bs = np.zeros((2, 4))
        msb = np.zeros((2, 4))
        ss_half = np.zeros(2)
        mss_half = np.zeros(2)
        sphi_half = np.zeros((2, 6))
        phis_half = np.zeros((2, 6))
        msphi_half = np.zeros((2, 6))
        for half in (0, 1):
            y = _restrict_ext(E, P, o, half, x_s, n_ext)
            yext[(o, half)] = y
            for i in range(4):
                sb[half, i] = apair(xs_ext[i], y)
                # a(b_S, b_T^i) = (1, b_T^i): test is in H1_0 of the patch
                bs[half, i] = int_b[i]
                msb[half, i] = mpair(xs_ext[i], y)
            ss_half[half] = apair(y, y)
            mss_half[half] = mpair(y, y)
            for v, ph in enumerate(phats):
                pv = _extend(E.lift(_restrict(o, half, ph, M)), n_ext)
                sphi_half[half, v] = apair(pv, y)
                phis_half[half, v] = apair(y, pv)
                msphi_half[half, v] = mpair(pv, y)
        patch[o] = PatchBlock(
            A_ss=int_s,  # a(b_S, b_S) = (1, b_S)
            A_sphi=np.array([P.a_pair(pi, x_s) for pi in p]),
            A_phis=np.array([P.a_pair(x_s, pi) for pi in p]),
            A_sb=sb,
            A_bs=bs,
            M_ss=P.m_pair(x_s, x_s),
            M_sphi=np.array([P.m_pair(pi, x_s) for pi in p]),
            M_sb=msb,
            int_s=int_s,
            A_ss_half=ss_half,
            A_sphi_half=sphi_half,
            A_phis_half=phis_half,
            M_ss_half=mss_half,
            M_sphi_half=msphi_half,
        )
    cross_A = {}
    cross_M = {}
    for cr in _CONFIGS:
        for cc in _CONFIGS:
            if cr == cc:
                continue
            cross_A[(cr, cc)] = apair(yext[cc], yext[cr])
            cross_M[(cr, cc)] = mpair(yext[cc], yext[cr])
    return StabTable(
        eps=sc.eps_hat, a=sc.a_hat, c=sc.c_hat, h=1.0, M=M, depth=depth,
        int_b=int_b, A_bb=A_bb, A_bphi=A_bphi, A_phib=A_phib,
        M_bb=M_bb, M_bphi=M_bphi, patch=patch,
        cross_A=cross_A, cross_M=cross_M,
        fields_b=np.array(B), fields_s=dict(S),
    )


# ---------------------------------------------------------------------------
# symmetry transforms of a table (exact index permutations)

_FLIPX_ELEM = [1, 0, 3, 2]
_FLIPY_ELEM = [3, 2, 1, 0]
_TRANS_ELEM = [0, 3, 2, 1]
# patch vertex permutations, row-major numbering
_FLIPX_H6 = [2, 1, 0, 5, 4, 3]
_FLIPX_V6 = [1, 0, 3, 2, 5, 4]
_FLIPY_H6 = [3, 4, 5, 0, 1, 2]
_FLIPY_V6 = [4, 5, 2, 3, 0, 1]
# transpose maps H vertex j to V vertex _TRANS_H2V[j] (self-inverse pair)
_TRANS_H2V = [0, 2, 4, 1, 3, 5]
_TRANS_V2H = [0, 3, 1, 4, 2, 5]


def _permute_block(blk, perm6, perm4, swap_halves):
    halves = [1, 0] if swap_halves else [0, 1]

    def p24(m):
        return m[halves][:, perm4]

    def p26(m):
        return m[halves][:, perm6]

    return PatchBlock(
        A_ss=blk.A_ss,
        A_sphi=blk.A_sphi[perm6],
        A_phis=blk.A_phis[perm6],
        A_sb=p24(blk.A_sb),
        A_bs=p24(blk.A_bs),
        M_ss=blk.M_ss,
        M_sphi=blk.M_sphi[perm6],
        M_sb=p24(blk.M_sb),
        int_s=blk.int_s,
        A_ss_half=blk.A_ss_half[halves],
        A_sphi_half=p26(blk.A_sphi_half),
        A_phis_half=p26(blk.A_phis_half),
        M_ss_half=blk.M_ss_half[halves],
        M_sphi_half=p26(blk.M_sphi_half),
    )


def _map_table(t, a_new, elem_perm, patch_spec, config_map, field_op):
    """Generic symmetry relabeling of a table.

    elem_perm[i] is the canonical index whose bubble becomes new index i;
    patch_spec maps new orientation -> (source orientation, perm6, perm4,
    swap_halves); config_map sends a new patch config to its canonical one;
    field_op is the lattice-array pullback of the coordinate map.
    """
    P = np.asarray(elem_perm)
    patch = {
        o: _permute_block(t.patch[src], perm6, perm4, swap)
        for o, (src, perm6, perm4, swap) in patch_spec.items()
    }
    fields_b = fields_s = None
    if t.fields_b is not None:
        fields_b = np.array([field_op(t.fields_b[P[i]]) for i in range(4)])
        fields_s = {
            o: field_op(t.fields_s[src])
            for o, (src, _, _, _) in patch_spec.items()
        }
    return replace(
        t,
        a=a_new,
        fields_b=fields_b,
        fields_s=fields_s,
        int_b=t.int_b[P],
        A_bb=t.A_bb[np.ix_(P, P)],
        A_bphi=t.A_bphi[np.ix_(P, P)],
        A_phib=t.A_phib[np.ix_(P, P)],
        M_bb=t.M_bb[np.ix_(P, P)],
        M_bphi=t.M_bphi[np.ix_(P, P)],
        patch=patch,
        cross_A={
            (r, c): t.cross_A[(config_map[r], config_map[c])]
            for r in _CONFIGS for c in _CONFIGS if r != c
        },
        cross_M={
            (r, c): t.cross_M[(config_map[r], config_map[c])]
            for r in _CONFIGS for c in _CONFIGS if r != c
        },
    )


def flipx_table(t):
    """Table for velocity (-a1, a2) from the table for (a1, a2)."""
    cmap = {
        (HORIZONTAL, 0): (HORIZONTAL, 1), (HORIZONTAL, 1): (HORIZONTAL, 0),
        (VERTICAL, 0): (VERTICAL, 0), (VERTICAL, 1): (VERTICAL, 1),
    }
    spec = {
        HORIZONTAL: (HORIZONTAL, _FLIPX_H6, _FLIPX_ELEM, True),
        VERTICAL: (VERTICAL, _FLIPX_V6, _FLIPX_ELEM, False),
    }
    return _map_table(
        t, (-t.a[0], t.a[1]), _FLIPX_ELEM, spec, cmap,
        lambda f: f[::-1, :],
    )


def flipy_table(t):
    """Table for velocity (a1, -a2) from the table for (a1, a2)."""
    cmap = {
        (HORIZONTAL, 0): (HORIZONTAL, 0), (HORIZONTAL, 1): (HORIZONTAL, 1),
        (VERTICAL, 0): (VERTICAL, 1), (VERTICAL, 1): (VERTICAL, 0),
    }
    spec = {
        HORIZONTAL: (HORIZONTAL, _FLIPY_H6, _FLIPY_ELEM, False),
        VERTICAL: (VERTICAL, _FLIPY_V6, _FLIPY_ELEM, True),
    }
    return _map_table(
        t, (t.a[0], -t.a[1]), _FLIPY_ELEM, spec, cmap,
        lambda f: f[:, ::-1],
    )


def transpose_table(t):
    """Table for velocity (a2, a1) from the table for (a1, a2)."""
    cmap = {
        (HORIZONTAL, 0): (VERTICAL, 0), (HORIZONTAL, 1): (VERTICAL, 1),
        (VERTICAL, 0): (HORIZONTAL, 0), (VERTICAL, 1): (HORIZONTAL, 1),
    }
    spec = {
        HORIZONTAL: (VERTICAL, _TRANS_H2V, _TRANS_ELEM, False),
        VERTICAL: (HORIZONTAL, _TRANS_V2H, _TRANS_ELEM, False),
    }
    return _map_table(
        t, (t.a[1], t.a[0]), _TRANS_ELEM, spec, cmap,
        lambda f: f.T,
    )


def _canonical(a):
    """(p, q, swap, sx, sy): sorted |components| and the transform flags."""
    a1, a2 = float(a[0]), float(a[1])
    swap = abs(a2) > abs(a1)
    p, q = (abs(a2), abs(a1)) if swap else (abs(a1), abs(a2))
    return p, q, swap, a1 < 0.0, a2 < 0.0


def _get_reference(sc, M, cache):
    """Reference-scale table for sc, via the canonical-orientation cache."""
    p, q, swap, sx, sy = _canonical(sc.a_hat)
    key = (sc.eps_hat, p, q, sc.c_hat, M)
    canon_sc = replace(sc, a_hat=(p, q), physical_h=1.0)
    if cache is None:
        t = _compute_reference(canon_sc, M, cache)
    else:
        t = cache._reference(key, canon_sc, M)
    if swap:
        t = transpose_table(t)
    if sx:
        t = flipx_table(t)
    if sy:
        t = flipy_table(t)
    return t


def element_contribs(sc, M, cache=None):
    """StabTable, at physical size sc.physical_h, for one coefficient set.

    Fine solves recurse while the fine-level Peclet is >= 1; each level
    computes 6 bubbles (4 element, 2 patch orientations) which are cached
    and shared across all elements with the same frozen coefficients.
    """
    return _get_reference(sc, M, cache).scaled(sc.physical_h)


class StabCache:
    """Synchronized cache of reference-scale tables plus run statistics."""

    def __init__(self):
        self._tables = {}
        self._lock = threading.Lock()
        self.tables_computed = 0
        self.bubble_solves = 0
        self.max_depth = 0

    def __len__(self):
        return len(self._tables)

    def _reference(self, key, sc, M):
        with self._lock:
            hit = self._tables.get(key)
        if hit is not None:
            return hit
        t = _compute_reference(sc, M, self)
        with self._lock:
            if key not in self._tables:
                self._tables[key] = t
                self.tables_computed += 1
                self.bubble_solves += 6
                self.max_depth = max(self.max_depth, t.depth)
            t = self._tables[key]
        return t

    def stats(self):
        return {
            "tables_computed": self.tables_computed,
            "bubble_solves": self.bubble_solves,
            "max_depth": self.max_depth,
            "cached_tables": len(self._tables),
        }

    # -- on-disk format: one .npz archive, version header, one array group
    #    per cached table

    FORMAT_VERSION = 1

    def save(self, path):
        arrays = {"format_version": np.array([self.FORMAT_VERSION])}
        keys = []
        for k, (key, t) in enumerate(sorted(self._tables.items())):
            keys.append(list(key) + [t.depth])
            g = f"t{k}"
            arrays[f"{g}/int_b"] = t.int_b
            arrays[f"{g}/A_bb"] = t.A_bb
            arrays[f"{g}/A_bphi"] = t.A_bphi
            arrays[f"{g}/A_phib"] = t.A_phib
            arrays[f"{g}/M_bb"] = t.M_bb
            arrays[f"{g}/M_bphi"] = t.M_bphi
            arrays[f"{g}/fields_b"] = t.fields_b
            arrays[f"{g}/fields_s_h"] = t.fields_s[HORIZONTAL]
            arrays[f"{g}/fields_s_v"] = t.fields_s[VERTICAL]
            for o in (HORIZONTAL, VERTICAL):
                b = t.patch[o]
                arrays[f"{g}/{o}/scal"] = np.array(
                    [b.A_ss, b.M_ss, b.int_s]
                )
                arrays[f"{g}/{o}/A_sphi"] = b.A_sphi
                arrays[f"{g}/{o}/A_phis"] = b.A_phis
                arrays[f"{g}/{o}/A_sb"] = b.A_sb
                arrays[f"{g}/{o}/A_bs"] = b.A_bs
                arrays[f"{g}/{o}/M_sphi"] = b.M_sphi
                arrays[f"{g}/{o}/M_sb"] = b.M_sb
                arrays[f"{g}/{o}/A_ss_half"] = b.A_ss_half
                arrays[f"{g}/{o}/A_sphi_half"] = b.A_sphi_half
                arrays[f"{g}/{o}/A_phis_half"] = b.A_phis_half
                arrays[f"{g}/{o}/M_ss_half"] = b.M_ss_half
                arrays[f"{g}/{o}/M_sphi_half"] = b.M_sphi_half
            order = [
                (r, c) for r in _CONFIGS for c in _CONFIGS if r != c
            ]
            arrays[f"{g}/cross_A"] = np.array(
                [t.cross_A[p] for p in order]
            )
            arrays[f"{g}/cross_M"] = np.array(
                [t.cross_M[p] for p in order]
            )
        arrays["keys"] = np.array(keys).reshape(len(keys), 6)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path):
        data = np.load(path)
        if int(data["format_version"][0]) != cls.FORMAT_VERSION:
            raise ValueError("unsupported stab-cache format version")
        cache = cls()
        order = [(r, c) for r in _CONFIGS for c in _CONFIGS if r != c]
        for k, row in enumerate(data["keys"]):
            eps, p, q, c, M, depth = row
            g = f"t{k}"
            patch = {}
            for o in (HORIZONTAL, VERTICAL):
                a_ss, m_ss, int_s = data[f"{g}/{o}/scal"]
                patch[o] = PatchBlock(
                    A_ss=a_ss, A_sphi=data[f"{g}/{o}/A_sphi"],
                    A_phis=data[f"{g}/{o}/A_phis"],
                    A_sb=data[f"{g}/{o}/A_sb"],
                    A_bs=data[f"{g}/{o}/A_bs"], M_ss=m_ss,
                    M_sphi=data[f"{g}/{o}/M_sphi"],
                    M_sb=data[f"{g}/{o}/M_sb"], int_s=int_s,
                    A_ss_half=data[f"{g}/{o}/A_ss_half"],
                    A_sphi_half=data[f"{g}/{o}/A_sphi_half"],
                    A_phis_half=data[f"{g}/{o}/A_phis_half"],
                    M_ss_half=data[f"{g}/{o}/M_ss_half"],
                    M_sphi_half=data[f"{g}/{o}/M_sphi_half"],
                )
            t = StabTable(
                eps=float(eps), a=(float(p), float(q)), c=float(c), h=1.0,
                M=int(M), depth=int(depth),
                int_b=data[f"{g}/int_b"], A_bb=data[f"{g}/A_bb"],
                A_bphi=data[f"{g}/A_bphi"], A_phib=data[f"{g}/A_phib"],
                M_bb=data[f"{g}/M_bb"], M_bphi=data[f"{g}/M_bphi"],
                patch=patch,
                cross_A=dict(zip(order, data[f"{g}/cross_A"])),
                cross_M=dict(zip(order, data[f"{g}/cross_M"])),
                fields_b=data[f"{g}/fields_b"],
                fields_s={
                    HORIZONTAL: data[f"{g}/fields_s_h"],
                    VERTICAL: data[f"{g}/fields_s_v"],
                },
            )
            key = (float(eps), float(p), float(q), float(c), int(M))
            cache._tables[key] = t
        return cache


class ConstantTables:
    """Table provider for constant coefficients: one table for everything."""

    uniform = True

    def __init__(self, table):
        self.table = table

    def element_table(self, e):
        return self.table

    def patch_table(self, p):
        return self.table

    def element_mean(self, e):
        return self.table.a


def physical_tables(coeffs, h, M, cache=None):
    """Convenience: the physical-scale table for constant coefficients."""
    return element_contribs(rescale(coeffs, h), M, cache)
