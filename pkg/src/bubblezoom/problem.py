"""Problem data: coefficient fields, boundary/initial data, example catalog."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import mesh as _mesh
from .q1 import GAUSS_PTS, GAUSS_WTS


def _as_field(value):
    """Wrap constants as callables of (x, y); pass callables through."""
    if callable(value):
        return value
    v = float(value)
    return lambda x, y: np.full_like(np.asarray(x, dtype=float), v)


@dataclass
class Coefficients:
    """Data of -eps*Lap(u) + a.grad(u) + c*u = f (plus u_t for transient runs)."""

    epsilon: float
    velocity: object  # (a1, a2) tuple or callable (x, y) -> (a1, a2)
    reaction: float = 0.0
    source: object = 0.0  # constant or callable (x, y)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.reaction < 0:
            raise ValueError("reaction must be nonnegative")
        self._source_fn = _as_field(self.source)

    @property
    def constant_velocity(self):
        return not callable(self.velocity)

    @property
    def velocity_magnitude(self):
        """|a| for constant velocity fields."""
        a1, a2 = self.velocity
        return float(np.hypot(a1, a2))

    def velocity_at(self, x, y):
        if self.constant_velocity:
            a1, a2 = self.velocity
            x = np.asarray(x, dtype=float)
            return np.full_like(x, a1), np.full_like(x, a2)
        a1, a2 = self.velocity(x, y)
        return np.asarray(a1, dtype=float), np.asarray(a2, dtype=float)

    def source_at(self, x, y):
        return np.asarray(self._source_fn(x, y), dtype=float)


@dataclass
class BoundaryData:
    """Dirichlet data, evaluable at every boundary vertex."""

    g: object  # constant or callable (x, y)

    def __post_init__(self):
        self._fn = _as_field(self.g)

    def at(self, x, y):
        return np.asarray(self._fn(x, y), dtype=float)


@dataclass
class InitialData:
    u0: object  # constant or callable (x, y)

    def __post_init__(self):
        self._fn = _as_field(self.u0)

    def at(self, x, y):
        return np.asarray(self._fn(x, y), dtype=float)


def element_peclet(coeffs, h, a_elem):
    """Element Peclet number |a| h / eps for a frozen element velocity."""
    if h <= 0:
        raise ValueError("h must be positive")
    return float(np.hypot(a_elem[0], a_elem[1]) * h / coeffs.epsilon)


def element_mean_velocity(coeffs, origin, h):
    """Mean of the velocity over the element square by 2x2 tensor Gauss.

    Exact for constant and affine velocity fields (e.g. the rigid rotation field).
    """
    if coeffs.constant_velocity:
        a1, a2 = coeffs.velocity
        return (float(a1), float(a2))
    gx = origin[0] + h * GAUSS_PTS[:, 0]
    gy = origin[1] + h * GAUSS_PTS[:, 1]
    a1, a2 = coeffs.velocity_at(gx, gy)
    return (float(np.dot(GAUSS_WTS, a1)), float(np.dot(GAUSS_WTS, a2)))


def check_admissibility(coeffs, grid):
    """Sample c - div(a)/2 at element centers; warn if negative anywhere."""
    cx = grid.origin[0] + (grid.elements[:, 0] + 0.5) * grid.h
    cy = grid.origin[1] + (grid.elements[:, 1] + 0.5) * grid.h
    if coeffs.constant_velocity:
        div = np.zeros_like(cx)
    else:
        d = 1e-7 * grid.h
        a1p, _ = coeffs.velocity_at(cx + d, cy)
        a1m, _ = coeffs.velocity_at(cx - d, cy)
        _, a2p = coeffs.velocity_at(cx, cy + d)
        _, a2m = coeffs.velocity_at(cx, cy - d)
        div = (a1p - a1m) / (2 * d) + (a2p - a2m) / (2 * d)
    worst = float((coeffs.reaction - 0.5 * div).min())
    if worst < -1e-10:
        warnings.warn(
            f"admissibility c - div(a)/2 >= 0 violated at element centers "
            f"(min {worst:.3e})",
            stacklevel=2,
        )
    return worst


@dataclass
class ExampleProblem:
    """One catalog entry: domain + data + recommended run parameters."""

    name: str
    origin: tuple
    extent: tuple
    mask: object  # None or predicate(x, y)
    coeffs: Coefficients
    boundary: BoundaryData
    initial: InitialData = None
    transient: bool = False
    exact: object = None  # callable with .grad, when known
    default_N: int = 50
    default_dt: float = None
    default_T: float = None

    def grid(self, N):
        n = (
            int(round(N * self.extent[0])),
            int(round(N * self.extent[1])),
        )
        return _mesh.build_grid(self.origin, self.extent, n, self.mask)


def _example1_g(x, y):
    # "1 if x1 = 1 or x2 = 0" takes precedence at conflicting corners.
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    on = np.isclose(x, 1.0, atol=1e-12) | np.isclose(y, 0.0, atol=1e-12)
    return np.where(on, 1.0, 0.0)


def _pyramid_u0(x, y, x0=(0.25, 0.75), r=0.1):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.maximum(0.0, 1.0 - (np.abs(x - x0[0]) + np.abs(y - x0[1])) / r)


def _rotation_velocity(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return y - 0.5, 0.5 - x


def get_example(name, eps=None, c=None, f=None):
    """Build a catalog problem, with optional eps/reaction/source overrides."""
    key = name.lower()
    if key not in EXAMPLES:
        raise KeyError(f"unknown example {name!r}; have {sorted(EXAMPLES)}")
    return EXAMPLES[key](eps=eps, c=c, f=f)


def _example0(eps=None, c=None, f=None):
    return ExampleProblem(
        name="example0",
        origin=(0.0, 0.0), extent=(1.0, 1.0), mask=None,
        coeffs=Coefficients(
            epsilon=1e-6 if eps is None else eps,
            velocity=(1.0, 0.5),
            reaction=0.0 if c is None else c,
            source=1.0 if f is None else f,
        ),
        boundary=BoundaryData(0.0),
        default_N=50,
    )


def _example1(eps=None, c=None, f=None):
    angle = np.pi / 6
    return ExampleProblem(
        name="example1",
        origin=(0.0, 0.0), extent=(1.0, 1.0), mask=None,
        coeffs=Coefficients(
            epsilon=1.0 if eps is None else eps,
            velocity=(-1e3 * np.cos(angle), -1e3 * np.sin(angle)),
            reaction=0.0 if c is None else c,
            source=0.0 if f is None else f,
        ),
        boundary=BoundaryData(_example1_g),
        default_N=24,
    )


def _example2(eps=None, c=None, f=None):
    from .analysis import ex2_exact, ex2_source

    epsilon = 1e-6 if eps is None else eps
    return ExampleProblem(
        name="example2",
        origin=(0.0, 0.0), extent=(1.0, 1.0), mask=None,
        coeffs=Coefficients(
            epsilon=epsilon,
            velocity=(1.0, 1.0),
            reaction=0.0 if c is None else c,
            source=ex2_source(epsilon) if f is None else f,
        ),
        boundary=BoundaryData(0.0),
        exact=ex2_exact(epsilon),
        default_N=10,
    )


def _example3(eps=None, c=None, f=None):
    return ExampleProblem(
        name="example3",
        origin=(0.0, 0.0), extent=(2.0, 2.0),
        mask=lambda x, y: not (x > 1.0 and y > 1.0),
        coeffs=Coefficients(
            epsilon=1e-6 if eps is None else eps,
            velocity=(-2.0, 1.0),
            reaction=0.0 if c is None else c,
            source=1.0 if f is None else f,
        ),
        boundary=BoundaryData(0.0),
        initial=InitialData(0.0),
        transient=True,
        default_N=50, default_dt=0.02, default_T=1.0,
    )


def _example4(eps=None, c=None, f=None):
    return ExampleProblem(
        name="example4",
        origin=(0.0, 0.0), extent=(1.0, 1.0), mask=None,
        coeffs=Coefficients(
            epsilon=1e-6 if eps is None else eps,
            velocity=_rotation_velocity,
            reaction=0.0 if c is None else c,
            source=1.0 if f is None else f,
        ),
        boundary=BoundaryData(0.0),
        initial=InitialData(_pyramid_u0),
        transient=True,
        default_N=80, default_dt=0.0025, default_T=6.0,
    )


EXAMPLES = {
    "example0": _example0,
    "example1": _example1,
    "example2": _example2,
    "example3": _example3,
    "example4": _example4,
}
