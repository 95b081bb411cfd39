"""Synthetic tube-tree volumes with exact ground-truth centerlines.

Voxel values follow the additive image model: background plus contrast
times the tube profile, blended across overlapping segments by maximum so
junction values never exceed background + contrast, plus optional Gaussian
noise. Segments are straight; each bifurcation splits symmetrically about
the parent direction with the split plane rotating 90 degrees per
generation so the tree spreads in 3-D.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .evaluate import CenterlineSet, Chain
from .template import orthonormal_frame, unit, _pow_half_gamma
from .volume import Volume3D


class DoesNotFit(Exception):
    """The requested tree does not fit inside the volume with margin."""


@dataclass(frozen=True)
class PhantomSpec:
    """Generative description of a binary tube tree inside a volume."""

    dims: tuple[int, int, int] = (96, 96, 120)
    spacing: tuple[float, float, float] = (0.75, 0.75, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    trunk_radius: float = 4.0
    radius_decay: float = 0.7
    generations: int = 2
    branch_angle: float = 70.0
    segment_length: float = 40.0
    contrast: float = 1.0
    background: float = 0.0
    noise_sigma: float = 0.1
    gamma: float = 8.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if not (0.0 < self.radius_decay <= 1.0):
            raise ValueError("radius decay must be in (0, 1]")
        if self.trunk_radius <= 0 or self.segment_length <= 0:
            raise ValueError("trunk radius and segment length must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be nonnegative")

    def to_json_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "origin": list(self.origin),
            "trunk_radius": self.trunk_radius,
            "radius_decay": self.radius_decay,
            "generations": self.generations,
            "branch_angle": self.branch_angle,
            "segment_length": self.segment_length,
            "contrast": self.contrast,
            "background": self.background,
            "noise_sigma": self.noise_sigma,
            "gamma": self.gamma,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PhantomSpec":
        kwargs = dict(d)
        for key in ("dims", "spacing", "origin"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class Segment:
    start: np.ndarray
    end: np.ndarray
    radius: float
    generation: int

    @property
    def direction(self) -> np.ndarray:
        return unit(self.end - self.start)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))


@dataclass(frozen=True)
class GroundTruth:
    centerlines: CenterlineSet
    bifurcation_points: list
    analytic_tube_volume: float
    segments: list = field(default_factory=list)


def _build_segments(spec: PhantomSpec) -> list[Segment]:
    """Binary tree of straight segments, trunk along +z."""
    lo = np.asarray(spec.origin, dtype=float)
    extent = (np.asarray(spec.dims) - 1) * np.asarray(spec.spacing)
    center_xy = lo[:2] + extent[:2] / 2.0
    margin = 2.0 * spec.trunk_radius
    start = np.array([center_xy[0], center_xy[1], lo[2] + margin])
    segments: list[Segment] = []

    def grow(p0: np.ndarray, direction: np.ndarray, generation: int) -> None:
        length = spec.segment_length * spec.radius_decay ** generation
        radius = spec.trunk_radius * spec.radius_decay ** generation
        p1 = p0 + direction * length
        segments.append(Segment(start=p0, end=p1, radius=radius,
                                generation=generation))
        if generation >= spec.generations:
            return
        e1, e2 = orthonormal_frame(direction)
        split_axis = e1 if generation % 2 == 0 else e2
        half = math.radians(spec.branch_angle / 2.0)
        for sign in (+1.0, -1.0):
            child_dir = unit(math.cos(half) * direction
                             + sign * math.sin(half) * split_axis)
            grow(p1, child_dir, generation + 1)

    grow(start, np.array([0.0, 0.0, 1.0]), 0)
    return segments


def _check_fit(spec: PhantomSpec, segments: list[Segment]) -> None:
    lo = np.asarray(spec.origin, dtype=float)
    hi = lo + (np.asarray(spec.dims) - 1) * np.asarray(spec.spacing)
    for seg in segments:
        pad = 2.0 * seg.radius
        for p in (seg.start, seg.end):
            if np.any(p - pad < lo) or np.any(p + pad > hi):
                raise DoesNotFit(
                    f"segment endpoint {p.tolist()} within 2r of the boundary"
                )


def _segment_profile(points: np.ndarray, seg: Segment, gamma: float) -> np.ndarray:
    """Tube profile against the finite segment (distance to the clamped axis)."""
    d = seg.end - seg.start
    length2 = float(d @ d)
    rel = points - seg.start
    t = np.clip((rel @ d) / length2, 0.0, 1.0)
    nearest = seg.start[None, :] + t[:, None] * d[None, :]
    diff = points - nearest
    d2 = np.einsum("ij,ij->i", diff, diff)
    rg = seg.radius ** gamma
    return rg / (_pow_half_gamma(d2, gamma) + rg)


def analytic_tree_volume(segments: list[Segment]) -> float:
    """Half-maximum isosurface volume of the blended tree, in mm^3.

    Each segment's half-maximum region is a capsule (cylinder plus two
    hemispherical end caps). Children sprout from the parent's end point,
    so per junction the children's capsule starts are already inside the
    parent's end ball; that overlap is subtracted with a cylinder-plus-
    half-cap estimate.
    """
    total = 0.0
    by_start: dict[tuple, list[Segment]] = {}
    for seg in segments:
        total += math.pi * seg.radius ** 2 * seg.length
        total += (4.0 / 3.0) * math.pi * seg.radius ** 3
        by_start.setdefault(tuple(np.round(seg.start, 9)), []).append(seg)
    for seg in segments:
        children = by_start.get(tuple(np.round(seg.end, 9)), [])
        for child in children:
            depth = min(seg.radius, child.length)
            overlap = math.pi * child.radius ** 2 * depth
            overlap += (2.0 / 3.0) * math.pi * child.radius ** 3
            total -= overlap
    return total


def generate_phantom(spec: PhantomSpec) -> tuple[Volume3D, GroundTruth]:
    """Rasterize the tree and return the volume plus exact ground truth.

    Deterministic for a fixed spec: noise comes from a generator seeded
    with rng_seed and is laid out in voxel scan order.
    """
    segments = _build_segments(spec)
    _check_fit(spec, segments)

    nx, ny, nz = spec.dims
    xs = spec.origin[0] + np.arange(nx) * spec.spacing[0]
    ys = spec.origin[1] + np.arange(ny) * spec.spacing[1]
    zs = spec.origin[2] + np.arange(nz) * spec.spacing[2]
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    points = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    best = np.zeros(points.shape[0])
    for seg in segments:
        np.maximum(best, _segment_profile(points, seg, spec.gamma), out=best)
    values = spec.background + spec.contrast * best
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.rng_seed)
        values = values + rng.normal(0.0, spec.noise_sigma, size=values.size)

    vol = Volume3D(dims=spec.dims, spacing=spec.spacing, origin=spec.origin,
                   data=values)

    chains = [Chain(points=np.stack([seg.start, seg.end]),
                    radii=np.array([seg.radius, seg.radius]))
              for seg in segments]
    bifurcations = [seg.end.copy() for seg in segments
                    if seg.generation < spec.generations]
    truth = GroundTruth(
        centerlines=CenterlineSet(chains=chains),
        bifurcation_points=bifurcations,
        analytic_tube_volume=analytic_tree_volume(segments),
        segments=segments,
    )
    return vol, truth
