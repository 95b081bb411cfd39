"""Centerline comparison: bidirectional mean nearest-point distance.

The error is a weighted sum of two terms: the mean distance from output
points to their nearest reference point (the false-positive term) and the
symmetric mean from reference points to the output (the false-negative
term). Chains are usually resampled to a uniform spacing first so the
measure does not depend on each method's step lengths.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class EmptyCenterline(Exception):
    """A centerline set with no points cannot be compared."""


@dataclass(frozen=True)
class Chain:
    """One ordered 3-D point chain, optionally with per-point radii."""

    points: np.ndarray
    radii: np.ndarray | None = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError("chain points must be a nonempty (N, 3) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("chain contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.radii is not None:
            r = np.asarray(self.radii, dtype=float)
            if r.shape != (pts.shape[0],):
                raise ValueError("radii must match the number of points")
            object.__setattr__(self, "radii", r)

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class CenterlineSet:
    chains: list[Chain]

    @property
    def n_points(self) -> int:
        return sum(len(c) for c in self.chains)

    def all_points(self) -> np.ndarray:
        if not self.chains:
            return np.empty((0, 3))
        return np.concatenate([c.points for c in self.chains], axis=0)


def densify_chain(points: np.ndarray, max_spacing: float) -> np.ndarray:
    """Linearly resample a polyline so consecutive spacing <= max_spacing.

    Endpoints and interior vertices are preserved; each segment is split
    into the fewest equal pieces that satisfy the bound. A single-point
    chain is returned unchanged.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if max_spacing <= 0:
        raise ValueError("max_spacing must be positive")
    if pts.shape[0] < 2:
        return pts.copy()
    out = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        seg = np.linalg.norm(b - a)
        n_sub = max(1, int(np.ceil(seg / max_spacing - 1e-12)))
        for t in range(1, n_sub + 1):
            out.append(a + (b - a) * (t / n_sub))
    return np.asarray(out)


def densify_set(cs: CenterlineSet, max_spacing: float) -> CenterlineSet:
    return CenterlineSet(chains=[
        Chain(points=densify_chain(c.points, max_spacing)) for c in cs.chains
    ])


@dataclass(frozen=True)
class ErrorReport:
    """Weighted bidirectional centerline distance with per-branch rows."""

    d_err: float
    fp_term: float
    fn_term: float
    w: float
    per_branch: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "d_err": self.d_err,
            "fp_term": self.fp_term,
            "fn_term": self.fn_term,
            "w": self.w,
            "per_branch": self.per_branch,
        }


def _nearest_distances(query: np.ndarray, target: np.ndarray) -> np.ndarray:
    tree = cKDTree(target)
    dist, _ = tree.query(query, k=1)
    return np.asarray(dist, dtype=float)


def centerline_distance(op: CenterlineSet, ref: CenterlineSet,
                        w: float = 0.5) -> ErrorReport:
    """Weighted sum of the two mean nearest-point distances.

    fp_term averages over output points against the reference; fn_term is
    the symmetric direction. Nearest neighbors are exact (KD-tree results
    equal brute force).
    """
    if not (0.0 <= w <= 1.0):
        raise ValueError("w must be in [0, 1]")
    if op.n_points == 0 or ref.n_points == 0:
        raise EmptyCenterline("both centerline sets must be nonempty")
    op_pts = op.all_points()
    ref_pts = ref.all_points()
    d_op = _nearest_distances(op_pts, ref_pts)
    d_ref = _nearest_distances(ref_pts, op_pts)
    fp_term = float(d_op.mean())
    fn_term = float(d_ref.mean())

    per_branch: dict = {"op": [], "ref": []}
    start = 0
    for i, chain in enumerate(op.chains):
        stop = start + len(chain)
        per_branch["op"].append(
            {"branch": i, "n_points": len(chain),
             "mean_dist_to_ref": float(d_op[start:stop].mean())}
        )
        start = stop
    start = 0
    for i, chain in enumerate(ref.chains):
        stop = start + len(chain)
        per_branch["ref"].append(
            {"branch": i, "n_points": len(chain),
             "mean_dist_to_op": float(d_ref[start:stop].mean())}
        )
        start = stop

    return ErrorReport(
        d_err=w * fp_term + (1.0 - w) * fn_term,
        fp_term=fp_term,
        fn_term=fn_term,
        w=w,
        per_branch=per_branch,
    )


# -- centerline CSV ----------------------------------------------------------

CSV_HEADER = ("branch_id", "point_index", "x_mm", "y_mm", "z_mm", "radius_mm")


def write_centerline_csv(cs: CenterlineSet, path) -> None:
    """One row per point: branch_id,point_index,x_mm,y_mm,z_mm,radius_mm."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for branch_id, chain in enumerate(cs.chains):
            radii = chain.radii if chain.radii is not None else np.zeros(len(chain))
            for idx, (pt, r) in enumerate(zip(chain.points, radii)):
                writer.writerow([
                    branch_id, idx,
                    f"{pt[0]:.6f}", f"{pt[1]:.6f}", f"{pt[2]:.6f}", f"{r:.6f}",
                ])


def read_centerline_csv(path) -> CenterlineSet:
    by_branch: dict[int, list[tuple[int, float, float, float, float]]] = {}
    with open(path, "r", newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ValueError(f"unexpected centerline CSV header: {header}")
        for row in reader:
            if not row:
                continue
            if len(row) != 6:
                raise ValueError(f"bad centerline CSV row: {row}")
            bid, idx = int(row[0]), int(row[1])
            x, y, z, r = (float(v) for v in row[2:])
            by_branch.setdefault(bid, []).append((idx, x, y, z, r))
    chains = []
    for bid in sorted(by_branch):
        rows = sorted(by_branch[bid])
        pts = np.asarray([[x, y, z] for _, x, y, z, _ in rows])
        radii = np.asarray([r for _, _, _, _, r in rows])
        chains.append(Chain(points=pts, radii=radii))
    if not chains:
        raise EmptyCenterline(f"no centerline points in {path}")
    return CenterlineSet(chains=chains)


def write_report_json(report: ErrorReport, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(report.to_json_dict(), fh, indent=2)
        fh.write("\n")
