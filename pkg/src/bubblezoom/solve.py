"""Steady drivers and the Crank-Nicolson stepper with retained bubble DOFs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import assembly
from .bubbles import (
    ConstantTables, StabCache, element_contribs, physical_tables, rescale,
)
from .linalg import SolveError, factorize, solve as linsolve
from .mesh import dof_layout
from .problem import Coefficients, element_mean_velocity, element_peclet


@dataclass
class Solution:
    """Coefficient vector of one computed field plus evaluation context.

    values is partitioned (vertex, element-bubble, patch-bubble) following
    the dof map; tables gives access to the bubble shapes for pointwise
    evaluation; time is None for steady solutions.
    """

    grid: object
    dofs: object
    coeffs: object
    scheme: str
    values: np.ndarray
    tables: object = None
    time: float = None
    report: object = None  # linear-solve report for steady runs

    def vertex_values(self):
        """Lattice array of vertex coefficients (NaN at inactive vertices)."""
        out = np.full((self.grid.nx + 1, self.grid.ny + 1), np.nan)
        act = self.dofs.vertex_dof >= 0
        out[act] = self.values[: self.dofs.n_vertex_dofs][
            self.dofs.vertex_dof[act]
        ]
        return out


class VariableTables:
    """Table provider for variable velocity, frozen to local means.

    Element tables are keyed by the element mean velocity.  With
    patch_velocity="element" (default) patch blocks are assembled per
    element half from each adjacent element's own table, which keeps the
    assembled mass matrix positive semidefinite; "mean" freezes each
    whole patch to the average of the two adjacent element means instead
    (this variant can render transient stepping unstable when the
    velocity varies, and is kept for comparison only).
    """

    uniform = False

    def __init__(self, grid, coeffs, M, cache=None,
                 patch_velocity="element"):
        if patch_velocity not in ("mean", "element"):
            raise ValueError(f"unknown patch_velocity {patch_velocity!r}")
        self.per_element = patch_velocity == "element"
        self.grid = grid
        self.coeffs = coeffs
        self.M = M
        self.cache = cache if cache is not None else StabCache()
        self._means = [
            element_mean_velocity(coeffs, grid.element_origin(e), grid.h)
            for e in range(grid.n_elements)
        ]
        if patch_velocity == "mean":
            self._patch_a = [
                tuple(
                    0.5 * (np.asarray(self._means[p.elements[0]])
                           + np.asarray(self._means[p.elements[1]]))
                )
                for p in grid.patches
            ]
        else:
            self._patch_a = [
                self._means[max(p.elements)] for p in grid.patches
            ]
        self._elem_tables = {}
        self._patch_tables = {}

    def _table(self, a):
        frozen = Coefficients(
            self.coeffs.epsilon, tuple(map(float, a)), self.coeffs.reaction
        )
        return physical_tables(frozen, self.grid.h, self.M, self.cache)

    def element_mean(self, e):
        return self._means[e]

    def element_table(self, e):
        t = self._elem_tables.get(e)
        if t is None:
            t = self._elem_tables[e] = self._table(self._means[e])
        return t

    def patch_table(self, p):
        t = self._patch_tables.get(p)
        if t is None:
            t = self._patch_tables[p] = self._table(self._patch_a[p])
        return t


def make_tables(grid, coeffs, M, cache=None, patch_velocity="element"):
    """Build the table provider appropriate for the velocity field."""
    if coeffs.constant_velocity:
        return ConstantTables(physical_tables(coeffs, grid.h, M, cache))
    return VariableTables(grid, coeffs, M, cache, patch_velocity)


def _max_peclet(grid, coeffs):
    if coeffs.constant_velocity:
        return element_peclet(coeffs, grid.h, coeffs.velocity)
    return max(
        element_peclet(
            coeffs, grid.h,
            element_mean_velocity(coeffs, grid.element_origin(e), grid.h),
        )
        for e in range(grid.n_elements)
    )


def _assemble(grid, coeffs, boundary, scheme, M, cache, patch_velocity,
              tau_rule):
    """Shared assembly: (dofs, A, mass, rhs_load, tables), unconstrained."""
    tables = None
    if scheme in ("rfb", "bmz") or (
        scheme == "supg" and tau_rule == "rfb-integral"
    ):
        tables = make_tables(grid, coeffs, M, cache, patch_velocity)
    dofs = dof_layout(grid, scheme)
    if scheme == "supg":
        A, rhs = assembly.assemble_supg(grid, dofs, coeffs, tau_rule, tables)
    else:
        A = assembly.assemble_operator(grid, dofs, coeffs, tables)
        rhs = assembly.assemble_load(grid, dofs, coeffs, tables)
    return dofs, A, rhs, tables


def solve_steady(grid, coeffs, boundary, scheme, M=20, cache=None,
                 patch_velocity="element", tau_rule="classic"):
    """Solve the steady problem with the requested scheme.

    If every element's Peclet number is below 1 the mesh resolves the
    problem and plain Galerkin is used regardless of the requested scheme.
    """
    if scheme != "galerkin" and _max_peclet(grid, coeffs) < 1.0:
        scheme = "galerkin"
    dofs, A, rhs, tables = _assemble(
        grid, coeffs, boundary, scheme, M, cache, patch_velocity, tau_rule
    )
    system = assembly.apply_dirichlet(A, rhs, grid, dofs, boundary)
    x, rep = linsolve(system.A, system.rhs, report=True)
    return Solution(grid, dofs, coeffs, scheme, x, tables, report=rep)


@dataclass
class Trajectory:
    """Result of a transient run: final state plus per-step observations."""

    final: Solution
    times: np.ndarray
    observed: list          # one list of per-step results per observer
    snapshots: list = field(default_factory=list)  # (time, Solution) pairs


def crank_nicolson(grid, coeffs, boundary, initial, scheme, dt, T,
                   M=20, cache=None, observers=(), store_every=None,
                   patch_velocity="element", tau_rule="classic"):
    """March (M + dt/2 A) U^n = (M - dt/2 A) U^{n-1} + dt F to time T.

    U^0 takes the nodal interpolation of the initial data with all bubble
    coefficients zero; Dirichlet rows are reimposed every step; observers
    are called as obs(step, t, solution) after every step (and at t=0).
    """
    if dt == 0.0:
        raise ValueError("dt must be nonzero")
    n_steps = int(round(T / dt))
    if n_steps < 1:
        raise ValueError("T must cover at least one step")
    dofs, A, load, tables = _assemble(
        grid, coeffs, boundary, scheme, M, cache, patch_velocity, tau_rule
    )
    if scheme == "supg":
        mass = assembly.assemble_mass(grid, dofs, None)
    else:
        mass = assembly.assemble_mass(grid, dofs, tables)
    lhs = (mass + 0.5 * dt * A).tocsr()
    rhs_mat = (mass - 0.5 * dt * A).tocsr()
    free = np.ones(dofs.total_dofs)
    free[dofs.boundary_dofs] = 0.0
    lhs_c = (sp.diags(free) @ lhs + sp.diags(1.0 - free)).tocsr()
    try:
        step_solve = factorize(lhs_c)
    except SolveError as err:
        raise SolveError(f"transient operator factorization failed: {err}")

    bl = dofs.boundary_lattice
    bx = grid.origin[0] + bl[:, 0] * grid.h
    by = grid.origin[1] + bl[:, 1] * grid.h
    gvals = np.asarray(boundary.at(bx, by), dtype=float)

    U = np.zeros(dofs.total_dofs)
    act = dofs.vertex_dof >= 0
    vx = grid.origin[0] + np.arange(grid.nx + 1)[:, None] * grid.h
    vy = grid.origin[1] + np.arange(grid.ny + 1)[None, :] * grid.h
    u0 = np.asarray(initial.at(vx + 0.0 * vy, vy + 0.0 * vx), dtype=float)
    U[dofs.vertex_dof[act]] = u0[act]
    U[dofs.boundary_dofs] = gvals

    def snapshot(t):
        return Solution(grid, dofs, coeffs, scheme, U.copy(), tables, t)

    observed = [[] for _ in observers]
    snapshots = []
    times = np.empty(n_steps + 1)
    times[0] = 0.0
    sol0 = snapshot(0.0)
    for out, obs in zip(observed, observers):
        out.append(obs(0, 0.0, sol0))
    if store_every:
        snapshots.append((0.0, sol0))
    for n in range(1, n_steps + 1):
        t = n * dt
        b = rhs_mat @ U + dt * load
        b[dofs.boundary_dofs] = gvals
        U = step_solve(b)
        if not np.all(np.isfinite(U)):
            raise SolveError(f"transient solve failed at step {n} (t={t:g})")
        times[n] = t
        need_snap = store_every and (
            n % store_every == 0 or n == n_steps
        )
        if observers or need_snap:
            sol = snapshot(t)
            for out, obs in zip(observed, observers):
                out.append(obs(n, t, sol))
            if need_snap:
                snapshots.append((t, sol))
    return Trajectory(snapshot(times[-1]), times, observed, snapshots)
