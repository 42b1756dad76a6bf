"""Bilinear (Q1) element utilities on axis-aligned squares.

Local node order is counterclockwise from the lower-left corner:
N0 at (0,0), N1 at (1,0), N2 at (1,1), N3 at (0,1) in unit coordinates.
All integrals here use 2x2 tensor Gauss quadrature, which is exact for the
polynomial degrees that occur with constant coefficients.
"""

from __future__ import annotations

import numpy as np

# 2x2 tensor Gauss rule mapped to [0,1]; weights sum to 1.
_G1 = 0.5 - 0.5 / np.sqrt(3.0)
_G2 = 0.5 + 0.5 / np.sqrt(3.0)
GAUSS_PTS = np.array(
    [(_G1, _G1), (_G2, _G1), (_G2, _G2), (_G1, _G2)]
)  # (4, 2)
GAUSS_WTS = np.full(4, 0.25)


def shape_values(xi, eta):
    """Q1 shape functions at unit coordinates; returns shape (4, ...)."""
    xi = np.asarray(xi)
    eta = np.asarray(eta)
    return np.stack(
        [(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta]
    )


def shape_gradients(xi, eta):
    """Unit-coordinate gradients; returns (dN/dxi, dN/deta), each (4, ...)."""
    xi = np.asarray(xi)
    eta = np.asarray(eta)
    one = np.ones_like(xi * eta)
    dxi = np.stack([-(1 - eta) * one, (1 - eta) * one, eta * one, -eta * one])
    deta = np.stack([-(1 - xi) * one, -xi * one, xi * one, (1 - xi) * one])
    return dxi, deta


# Shape data at the 4 Gauss points: (npts, 4)
SHAPE_G = shape_values(GAUSS_PTS[:, 0], GAUSS_PTS[:, 1]).T
GRADXI_G, GRADETA_G = (
    g.T for g in shape_gradients(GAUSS_PTS[:, 0], GAUSS_PTS[:, 1])
)


def _unit_matrix(weight_fn):
    m = np.zeros((4, 4))
    for g in range(4):
        n = SHAPE_G[g]
        gx = GRADXI_G[g]
        gy = GRADETA_G[g]
        m += GAUSS_WTS[g] * weight_fn(n, gx, gy)
    return m


# Unit-square matrices: stiffness, x/y advection (d/dxi N_j * N_i), mass.
UNIT_STIFF = _unit_matrix(lambda n, gx, gy: np.outer(gx, gx) + np.outer(gy, gy))
UNIT_ADVX = _unit_matrix(lambda n, gx, gy: np.outer(n, gx))
UNIT_ADVY = _unit_matrix(lambda n, gx, gy: np.outer(n, gy))
UNIT_MASS = _unit_matrix(lambda n, gx, gy: np.outer(n, n))


def operator_element_matrix(s, eps, a1, a2, c):
    """4x4 matrix of a(N_j, N_i) over a square of side s, constant data.

    Row index is the test function, column index the trial function.
    """
    return (
        eps * UNIT_STIFF
        + a1 * s * UNIT_ADVX
        + a2 * s * UNIT_ADVY
        + c * s * s * UNIT_MASS
    )


def mass_element_matrix(s):
    """4x4 matrix of (N_j, N_i) over a square of side s."""
    return s * s * UNIT_MASS


def supg_element_matrix(s, a1, a2, c, tau):
    """SUPG extra term tau * ((a.grad + c) N_j, a.grad N_i) on a side-s square.

    Q1 functions on squares have zero Laplacian, so the strong residual of the
    trial function reduces to the advective and reactive parts.
    """
    m = np.zeros((4, 4))
    for g in range(4):
        n = SHAPE_G[g]
        agx = (a1 * GRADXI_G[g] + a2 * GRADETA_G[g]) / s
        m += GAUSS_WTS[g] * np.outer(agx, agx + c * n)
    return tau * s * s * m


def cell_corners(u):
    """Corner values per lattice cell: (nx+1, ny+1) -> (nx, ny, 4)."""
    return np.stack(
        [u[:-1, :-1], u[1:, :-1], u[1:, 1:], u[:-1, 1:]], axis=-1
    )


def pair_fields(u, v, s, eps, a1, a2, c):
    """Advection-diffusion-reaction pairing a(u, v) of two lattice fields.

    u, v are nodal arrays on the same uniform lattice with cell side s; the
    fields are the piecewise bilinear interpolants.  u is the trial function,
    v the test function.
    """
    cu = cell_corners(np.asarray(u, dtype=float))
    cv = cell_corners(np.asarray(v, dtype=float))
    total = 0.0
    for g in range(4):
        uval = cu @ SHAPE_G[g]
        vval = cv @ SHAPE_G[g]
        ux = (cu @ GRADXI_G[g]) / s
        uy = (cu @ GRADETA_G[g]) / s
        vx = (cv @ GRADXI_G[g]) / s
        vy = (cv @ GRADETA_G[g]) / s
        integrand = eps * (ux * vx + uy * vy) + (a1 * ux + a2 * uy) * vval
        if c != 0.0:
            integrand = integrand + c * uval * vval
        total += GAUSS_WTS[g] * integrand.sum()
    return total * s * s


def mass_pair_fields(u, v, s):
    """(u, v) for two nodal lattice fields with cell side s."""
    cu = cell_corners(np.asarray(u, dtype=float))
    cv = cell_corners(np.asarray(v, dtype=float))
    total = 0.0
    for g in range(4):
        total += GAUSS_WTS[g] * ((cu @ SHAPE_G[g]) * (cv @ SHAPE_G[g])).sum()
    return total * s * s


def integral_field(u, s):
    """Integral of a nodal lattice field (exact for the Q1 interpolant)."""
    cu = cell_corners(np.asarray(u, dtype=float))
    total = 0.0
    for g in range(4):
        total += GAUSS_WTS[g] * (cu @ SHAPE_G[g]).sum()
    return total * s * s
