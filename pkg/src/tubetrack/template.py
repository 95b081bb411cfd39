"""Idealized tube model: radial profile, axis geometry and the fitting stencil.

The profile maps distance-to-axis to [0, 1]: value 1 on the axis, 0.5 at one
radius, falling off with steepness controlled by ``gamma``. A stencil is the
deterministic set of sample points and localizing weights used by the
weighted least-squares fit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Stencils above this size are thinned by coarsening the grid pitch so that
# fit cost stays bounded for large radii.
STENCIL_POINT_BUDGET = 1200


class DegenerateStencil(Exception):
    """Too few usable sample points to support a fit."""


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = float(np.linalg.norm(v))
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize a zero or non-finite vector")
    return v / n


def orthonormal_frame(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (e1, e2) completing ``direction`` to a right-handed frame.

    The reference axis is the world axis least aligned with ``direction``
    (ties resolved toward lower axis index), so the frame is a pure function
    of the input vector.
    """
    d = unit(direction)
    ref_axis = int(np.argmin(np.abs(d)))
    ref = np.zeros(3)
    ref[ref_axis] = 1.0
    e1 = unit(_cross(ref, d))
    e2 = _cross(d, e1)
    return e1, e2


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # np.cross has shape-handling overhead that shows up in fit-heavy runs
    return np.array([
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ])


@dataclass(frozen=True)
class TubeTemplate:
    """Tube of radius ``radius`` (mm) along ``direction`` through ``center``."""

    center: np.ndarray
    direction: np.ndarray
    radius: float
    gamma: float = 8.0

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).copy()
        direction = np.asarray(self.direction, dtype=float).copy()
        if center.shape != (3,) or direction.shape != (3,):
            raise ValueError("center and direction must be 3-vectors")
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(direction))):
            raise ValueError("non-finite template geometry")
        if abs(float(np.linalg.norm(direction)) - 1.0) > 1e-9:
            raise ValueError("direction must be unit length (within 1e-9)")
        if not (self.radius > 0.0 and np.isfinite(self.radius)):
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.gamma < 2.0:
            raise ValueError(f"gamma must be >= 2, got {self.gamma}")
        center.flags.writeable = False
        direction.flags.writeable = False
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "direction", direction)
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "gamma", float(self.gamma))


def axis_distance_sq(t: TubeTemplate, p) -> float:
    """Squared distance (mm^2) from ``p`` to the template axis."""
    diff = np.asarray(p, dtype=float) - t.center
    along = float(diff @ t.direction)
    return float(diff @ diff - along * along)


def _pow_half_gamma(d2: np.ndarray, gamma: float) -> np.ndarray:
    """(d^2)^(gamma/2), with fast paths for small even integer gamma."""
    half = gamma / 2.0
    if half == int(half) and 1 <= int(half) <= 8:
        acc = d2
        for _ in range(int(half) - 1):
            acc = acc * d2
        return acc
    return np.power(d2, half)


def template_values(points: np.ndarray, center: np.ndarray, direction: np.ndarray,
                    radius: float, gamma: float) -> np.ndarray:
    """Profile values at an (N, 3) world point array. Hot path of the fit."""
    diff = points - center
    along = diff @ direction
    d2 = np.einsum("ij,ij->i", diff, diff) - along * along
    np.maximum(d2, 0.0, out=d2)
    rg = radius ** gamma
    return rg / (_pow_half_gamma(d2, gamma) + rg)


def template_value(t: TubeTemplate, p) -> float:
    """Profile value in (0, 1]: 1 on-axis, 0.5 at distance ``radius``."""
    pt = np.asarray(p, dtype=float)
    return float(template_values(pt[None, :], t.center, t.direction, t.radius, t.gamma)[0])


@dataclass(frozen=True)
class SampleStencil:
    """Sample points (N, 3 world mm) with localizing weights (N,)."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or w.shape != (pts.shape[0],):
            raise ValueError("points must be (N, 3) with matching (N,) weights")
        if pts.shape[0] < 16:
            raise DegenerateStencil(f"stencil has only {pts.shape[0]} points")
        if not np.all(np.isfinite(w)) or np.any(w < 0) or not np.any(w > 0):
            raise ValueError("weights must be finite, nonnegative, not all zero")
        pts = pts.copy()
        w = w.copy()
        pts.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return int(self.points.shape[0])


def build_stencil(t: TubeTemplate, weight_window_factor: float, spacing_hint,
                  bounds: tuple[np.ndarray, np.ndarray] | None = None) -> SampleStencil:
    """Deterministic sample grid around a template.

    The grid fills a cylinder-trimmed box oriented along the template axis:
    half-extent ``2*f*r`` radially and ``f*r`` axially, where ``f`` is the
    weight window factor. Pitch is the finest spacing component, coarsened
    only when the raw point count would exceed ``STENCIL_POINT_BUDGET``.
    The weight at a point is an asymmetric Gaussian, tighter axially so the
    fit is dominated by the cross-section at the current step:

        exp(-rho^2 / (2 (f r)^2) - a^2 / (2 (f r / 2)^2))

    with rho the radial and ``a`` the axial offset from the center.

    When ``bounds`` (world lo/hi corners) is given, points outside are
    dropped; fewer than 16 surviving points raises DegenerateStencil.
    """
    if weight_window_factor <= 0:
        raise ValueError("weight window factor must be positive")
    f = float(weight_window_factor)
    r = t.radius
    radial_half = 2.0 * f * r
    axial_half = f * r
    h = float(min(spacing_hint))
    if h <= 0:
        raise ValueError("spacing hint components must be positive")
    box_volume = np.pi * radial_half ** 2 * (2.0 * axial_half)
    h_budget = (box_volume / STENCIL_POINT_BUDGET) ** (1.0 / 3.0)
    h = max(h, h_budget)

    n_rad = int(np.floor(radial_half / h))
    n_ax = int(np.floor(axial_half / h))
    u = np.arange(-n_rad, n_rad + 1) * h
    a = np.arange(-n_ax, n_ax + 1) * h
    u1, u2, u3 = np.meshgrid(u, u, a, indexing="ij")
    u1 = u1.ravel()
    u2 = u2.ravel()
    u3 = u3.ravel()
    rho2 = u1 * u1 + u2 * u2
    keep = rho2 <= radial_half ** 2 + 1e-12
    u1, u2, u3, rho2 = u1[keep], u2[keep], u3[keep], rho2[keep]

    e1, e2 = orthonormal_frame(t.direction)
    points = (t.center[None, :]
              + u1[:, None] * e1[None, :]
              + u2[:, None] * e2[None, :]
              + u3[:, None] * t.direction[None, :])
    sig_r = f * r
    sig_a = f * r / 2.0
    weights = np.exp(-rho2 / (2.0 * sig_r ** 2) - (u3 * u3) / (2.0 * sig_a ** 2))

    if bounds is not None:
        lo, hi = bounds
        inside = np.all((points >= lo) & (points <= hi), axis=1)
        points = points[inside]
        weights = weights[inside]
    if points.shape[0] < 16:
        raise DegenerateStencil(
            f"only {points.shape[0]} in-bounds stencil points for r={r:.3g}"
        )
    return SampleStencil(points=points, weights=weights)
