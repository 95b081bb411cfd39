"""Branch tracking: stepping, bifurcation handling, queueing, termination.

A branch advances by fitting candidate templates one step ahead of the
current hypothesis-tree frontier, committing one point at a time through
the deferred-decision machinery, and splitting into two child branches when
the frontier separates into two spatial clusters. Children either inherit
the pruned hypothesis tree of their lineage (rank mode's history transfer)
or restart with a fresh tree at the detected branch points (original mode).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor, wait, FIRST_COMPLETED
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .evaluate import CenterlineSet, Chain
from .fitting import FitConfig, FitFailed, FitResult, fit_template
from .hypothesis import HypothesisTree, LocalHypothesis, ScoringMode
from .template import TubeTemplate, orthonormal_frame, unit
from .volume import Volume3D, as_point


class SeedFitFailed(Exception):
    """No usable template fit at the seed point."""


class TerminationReason(str, Enum):
    BELOW_GLOBAL_THRESHOLD = "below_global_threshold"
    OUT_OF_BOUNDS = "out_of_bounds"
    RADIUS_OUT_OF_RANGE = "radius_out_of_range"
    MAX_STEPS = "max_steps"
    REVISITED_TERRITORY = "revisited_territory"
    FIT_FAILURE = "fit_failure"
    BIFURCATED = "bifurcated"


@dataclass(frozen=True)
class TrackerConfig:
    """Tracking parameters; defaults are the tuned modified-method preset."""

    scoring_mode: ScoringMode = ScoringMode.RANK_BASED
    weight_window_factor: float = 1.0
    step_length_factor: float = 1.1
    max_search_angle: float = 70.0
    n_angle_rings: int = 2
    local_threshold: float | None = None
    global_threshold: float = 0.7
    search_depth: int = 6
    r_min: float = 1.0
    r_max: float = 10.0
    gamma: float = 8.0
    max_steps_per_branch: int = 500
    bifurcation_separation_factor: float = 1.0
    max_candidates_per_step: int = 12
    # Rank-based scoring is purely relative, so it carries no notion of a
    # hypothesis being absolutely implausible; this gate supplies one
    # without reintroducing scale dependence. A candidate is admitted only
    # while its fitted contrast stays above this fraction of the branch's
    # recent median contrast (contrast ratios are invariant both to affine
    # intensity maps and to structure size). Ignored in original mode,
    # whose local threshold plays the same role.
    min_contrast_ratio: float = 0.25

    def __post_init__(self):
        if not (0.0 < self.max_search_angle < 90.0):
            raise ValueError("max search angle must be in (0, 90) degrees")
        if self.n_angle_rings < 1:
            raise ValueError("need at least one angle ring")
        if self.step_length_factor <= 0.0:
            raise ValueError("step length factor must be positive")
        if not (0 < self.r_min < self.r_max):
            raise ValueError("need 0 < r_min < r_max")
        object.__setattr__(self, "scoring_mode", ScoringMode(self.scoring_mode))

    def fit_config(self) -> FitConfig:
        # tracking inits continue an already-fitted tube; a moderate
        # iteration budget keeps even the widest-angle candidates converged
        # without paying for pathological cases
        return FitConfig(
            max_iterations=25,
            r_min=self.r_min,
            r_max=self.r_max,
            weight_window_factor=self.weight_window_factor,
            gamma=self.gamma,
        )


_CONFIG_FIELDS = {
    "scoring_mode": lambda s: ScoringMode(s),
    "weight_window_factor": float,
    "step_length_factor": float,
    "max_search_angle": float,
    "n_angle_rings": int,
    "local_threshold": lambda s: None if s.lower() in ("none", "-", "") else float(s),
    "global_threshold": float,
    "search_depth": int,
    "r_min": float,
    "r_max": float,
    "gamma": float,
    "max_steps_per_branch": int,
    "bifurcation_separation_factor": float,
    "max_candidates_per_step": int,
    "min_contrast_ratio": float,
}

# Branches deeper than this many bifurcation generations are not spawned; a
# safety valve against runaway bifurcation cascades in structureless data
# (airway trees at phantom or CT scale sit far below it). Depth-based so the
# spawn decision is a pure function of the branch, independent of worker
# scheduling.
MAX_BRANCH_GENERATIONS = 10


def parse_config(text: str) -> TrackerConfig:
    """Parse the ``key = value`` config format (one pair per line, # comments)."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_FIELDS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _CONFIG_FIELDS[key](value)
    return TrackerConfig(**values)


def load_config(path) -> TrackerConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_to_text(cfg: TrackerConfig) -> str:
    lines = []
    for key in _CONFIG_FIELDS:
        value = getattr(cfg, key)
        if isinstance(value, ScoringMode):
            value = value.value
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class BranchPoint:
    position: np.ndarray
    radius: float
    raw_score: float
    rank_score: float
    contrast: float = 0.0  # fitted contrast, drives the continuity gate

    @classmethod
    def from_node(cls, node: LocalHypothesis) -> "BranchPoint":
        return cls(
            position=np.asarray(node.fit.template.center, dtype=float),
            radius=float(node.fit.template.radius),
            raw_score=float(node.raw_score),
            rank_score=float(node.rank_score if node.rank_score is not None else 1.0),
            contrast=float(node.fit.contrast),
        )


@dataclass
class Branch:
    """One tracked tube segment: an ordered point chain plus bookkeeping.

    ``path`` is the position of the branch in the tracked tree, assigned
    deterministically at spawn time ((0,) for the root, parent path + 0/1
    for bifurcation children), so results are independent of worker
    scheduling. Integer ids are assigned afterwards in breadth-first path
    order.
    """

    path: tuple[int, ...]
    parent_path: tuple[int, ...] | None
    points: list[BranchPoint]
    termination_reason: TerminationReason | None = None
    id: int | None = None
    parent_id: int | None = None


@dataclass
class TrackedTree:
    branches: list[Branch]
    seed: np.ndarray
    hypothesis_dumps: list | None = None

    def branch_by_path(self, path: tuple[int, ...]) -> Branch:
        for b in self.branches:
            if b.path == path:
                return b
        raise KeyError(path)

    def to_json_dict(self) -> dict:
        return {
            "seed": [float(c) for c in self.seed],
            "branches": [
                {
                    "id": b.id,
                    "parent_id": b.parent_id,
                    "termination_reason": b.termination_reason.value
                    if b.termination_reason else None,
                    "points": [
                        {
                            "position": [float(c) for c in p.position],
                            "radius": p.radius,
                            "raw_score": p.raw_score,
                            "rank_score": p.rank_score,
                        }
                        for p in b.points
                    ],
                }
                for b in self.branches
            ],
        }


def candidate_directions(current, max_angle: float, n_rings: int) -> np.ndarray:
    """Deterministic unit directions covering a cone around ``current``.

    The current direction itself, plus rings at polar angles
    j * max_angle / n_rings, each carrying enough evenly spaced azimuthal
    samples to keep the on-sphere spacing near the ring step.
    """
    d = unit(np.asarray(current, dtype=float))
    e1, e2 = orthonormal_frame(d)
    delta_rad = math.radians(max_angle / n_rings)
    dirs = [d]
    for j in range(1, n_rings + 1):
        theta = math.radians(j * max_angle / n_rings)
        n_az = int(math.ceil(2.0 * math.pi * math.sin(theta) / delta_rad))
        for t in range(n_az):
            phi = 2.0 * math.pi * t / n_az
            v = (math.cos(theta) * d
                 + math.sin(theta) * (math.cos(phi) * e1 + math.sin(phi) * e2))
            dirs.append(v / np.linalg.norm(v))
    return np.asarray(dirs)


@dataclass
class StepOutcome:
    """Candidates from expanding one leaf, plus why others were dropped."""

    hypotheses: list[LocalHypothesis]
    n_out_of_bounds: int = 0
    n_failed: int = 0
    n_gated: int = 0


def step_branch(vol: Volume3D, tree: HypothesisTree, tip: FitResult,
                cfg: TrackerConfig,
                contrast_floor: float | None = None) -> StepOutcome:
    """Fit candidate continuations one step ahead of ``tip``.

    Template inits are placed at step_length_factor * previous radius along
    each candidate direction, with the previous radius and the candidate
    direction as starting geometry. Out-of-bounds inits, failed fits and
    (rank mode) fits whose contrast falls below ``contrast_floor`` are
    dropped; the survivors are sorted by descending raw score (ties toward
    smaller radius) and capped at max_candidates_per_step.
    """
    fitcfg = cfg.fit_config()
    r_prev = min(max(tip.template.radius, cfg.r_min), cfg.r_max)
    step = cfg.step_length_factor * r_prev
    out: list[LocalHypothesis] = []
    n_oob = 0
    n_failed = 0
    n_gated = 0
    for v_c in candidate_directions(tip.template.direction,
                                    cfg.max_search_angle, cfg.n_angle_rings):
        x_init = tip.template.center + step * v_c
        if not vol.contains(x_init):
            n_oob += 1
            continue
        init = TubeTemplate(center=x_init, direction=v_c, radius=r_prev,
                            gamma=cfg.gamma)
        try:
            fit = fit_template(vol, init, fitcfg)
        except FitFailed:
            n_failed += 1
            continue
        if contrast_floor is not None and fit.contrast < contrast_floor:
            n_gated += 1
            continue
        out.append(LocalHypothesis(fit=fit, raw_score=fit.t_stat))
    order = sorted(
        range(len(out)),
        key=lambda i: (-out[i].raw_score, out[i].fit.template.radius, i),
    )
    capped = [out[i] for i in order[: cfg.max_candidates_per_step]]
    # re-establish generation order so sibling ranking sees candidates in a
    # stable direction-derived order
    keep_ids = set(id(h) for h in capped)
    capped = [h for h in out if id(h) in keep_ids]
    return StepOutcome(hypotheses=capped, n_out_of_bounds=n_oob,
                       n_failed=n_failed, n_gated=n_gated)


def detect_bifurcation(leaves: list[LocalHypothesis], kappa: float, axis=None):
    """Two-cluster split test on leaf centers.

    Deterministic 2-means (seeded with the two mutually farthest leaves,
    at most 50 sweeps). Fires when the cluster centroids separate by more
    than kappa * (mean radius A + mean radius B) and the separation is not
    purely along the travel direction (leaves strung out along one tube
    advance at different rates and must not count as a split); ``axis``
    supplies that direction, defaulting to the mean leaf direction.
    Returns the highest raw-score leaf of each cluster, or None.
    """
    if len(leaves) < 2:
        return None
    centers = np.asarray([lf.fit.template.center for lf in leaves])
    n = len(leaves)
    diff = centers[:, None, :] - centers[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", diff, diff)
    i0, j0 = divmod(int(np.argmax(dist2)), n)
    if dist2[i0, j0] == 0.0:
        return None
    c_a, c_b = centers[i0].copy(), centers[j0].copy()
    assign = np.zeros(n, dtype=int)
    for sweep in range(50):
        da = np.einsum("ij,ij->i", centers - c_a, centers - c_a)
        db = np.einsum("ij,ij->i", centers - c_b, centers - c_b)
        new_assign = (db < da).astype(int)  # ties stay in cluster A
        if np.array_equal(new_assign, assign) and sweep > 0:
            break
        assign = new_assign
        if assign.all() or not assign.any():
            return None
        c_a = centers[assign == 0].mean(axis=0)
        c_b = centers[assign == 1].mean(axis=0)
    if assign.all() or not assign.any():
        return None
    radii = np.asarray([lf.fit.template.radius for lf in leaves])
    r_a = float(radii[assign == 0].mean())
    r_b = float(radii[assign == 1].mean())
    gap = c_a - c_b
    separation = float(np.linalg.norm(gap))
    if separation <= kappa * (r_a + r_b):
        return None
    if axis is None:
        axis = np.sum([lf.fit.template.direction for lf in leaves], axis=0)
    norm = float(np.linalg.norm(np.asarray(axis, dtype=float)))
    if norm > 1e-9:
        axial = abs(float(gap @ (np.asarray(axis, dtype=float) / norm))) / separation
        if axial > 0.8:
            return None

    def best(cluster: int) -> LocalHypothesis:
        members = [lf for lf, a in zip(leaves, assign) if a == cluster]
        return max(members, key=lambda lf: (lf.raw_score, -lf.seq))

    return best(0), best(1)


# -- branch tracking ---------------------------------------------------------


@dataclass
class _BranchTask:
    path: tuple[int, ...]
    parent_path: tuple[int, ...] | None
    tree: HypothesisTree
    anchor: BranchPoint | None  # first point of the branch (committed state)
    # flattened (position, radius) commits of every ancestor branch; frozen
    # before this task starts, so live revisit checks stay deterministic
    # for any worker count
    ancestor_centers: np.ndarray | None = None
    ancestor_radii: np.ndarray | None = None


@dataclass
class _BranchRun:
    branch: Branch
    children: list[_BranchTask]
    snapshots: list[dict]


# Multiple of the anchor radius within which a child branch may overlap its
# ancestors' territory (the shared lumen around a junction).
_JUNCTION_BALL = 3.0


def _revisits(branch: Branch, point: BranchPoint, task: _BranchTask) -> bool:
    """Live revisit test for a candidate commit.

    True when the point falls inside one of the branch's own fitted spheres
    (three or more commits back, so ordinary forward progress and gentle
    bends stay clear) or inside an ancestor's sphere beyond the junction
    neighborhood. Both use state frozen before this branch started, so the
    outcome is independent of worker scheduling.
    """
    pos = point.position
    if len(branch.points) >= 3:
        prior = branch.points[:len(branch.points) - 2]
        cs = np.asarray([p.position for p in prior])
        rs = np.asarray([p.radius for p in prior])
        d2 = np.einsum("ij,ij->i", cs - pos, cs - pos)
        if bool(np.any(d2 <= rs * rs)):
            return True
    if task.ancestor_centers is not None and task.ancestor_centers.size:
        anchor = branch.points[0]
        if (np.linalg.norm(pos - anchor.position)
                > _JUNCTION_BALL * max(anchor.radius, 1e-6)):
            d2 = np.einsum("ij,ij->i", task.ancestor_centers - pos,
                           task.ancestor_centers - pos)
            if bool(np.any(d2 <= task.ancestor_radii ** 2)):
                return True
    return False


@dataclass
class _ExpandStats:
    grew: bool
    n_out_of_bounds: int = 0
    n_failed: int = 0
    n_gated: int = 0


def _expand_frontier(vol: Volume3D, tree: HypothesisTree, cfg: TrackerConfig,
                     contrast_floor: float | None = None) -> _ExpandStats:
    """Expand every expandable leaf once; cap new leaves tree-wide.

    max_candidates_per_step bounds the hypotheses admitted per tracking
    step across the whole tree (rank scores are assigned within the full
    sibling sets before the cap). The budget goes to the best candidates by
    raw score among spatially distinct fits: lineages that converge onto
    the same tube point are duplicates, and collapsing them keeps the
    frontier spread over genuinely different continuations (both daughter
    openings at a branching, rather than twelve copies of one).
    """
    frontier = sorted(tree.frontier(), key=lambda n: n.seq)
    stats = _ExpandStats(grew=False)
    new_nodes: list[LocalHypothesis] = []
    for leaf in frontier:
        outcome = step_branch(vol, tree, leaf.fit, cfg, contrast_floor)
        stats.n_out_of_bounds += outcome.n_out_of_bounds
        stats.n_failed += outcome.n_failed
        stats.n_gated += outcome.n_gated
        tree.expand_leaf(leaf, outcome.hypotheses)
        new_nodes.extend(leaf.children)
    if not new_nodes:
        return stats
    stats.grew = True

    def order_key(h: LocalHypothesis):
        return (-h.raw_score, h.fit.template.radius, h.seq)

    keep: list[LocalHypothesis] = []
    for node in sorted(new_nodes, key=order_key):
        if len(keep) >= cfg.max_candidates_per_step:
            break
        c = node.fit.template.center
        r = node.fit.template.radius
        duplicate = any(
            float(np.linalg.norm(c - k.fit.template.center))
            < 0.5 * min(r, k.fit.template.radius)
            for k in keep
        )
        if not duplicate:
            keep.append(node)
    keep_ids = set(id(h) for h in keep)
    for node in new_nodes:
        if id(node) not in keep_ids:
            parent = node.parent
            tree.detach(node)
            if parent is not None and parent.is_leaf:
                parent.exhausted = True
    return stats


def _track_branch(vol: Volume3D, cfg: TrackerConfig, task: _BranchTask,
                  collect_snapshots: bool = False) -> _BranchRun:
    tree = task.tree
    branch = Branch(path=task.path, parent_path=task.parent_path,
                    points=[task.anchor] if task.anchor else [])
    if not branch.points:
        branch.points.append(BranchPoint.from_node(tree.root))
    snapshots: list[dict] = []
    if collect_snapshots:
        snapshots.append(tree.to_json_dict())
    children: list[_BranchTask] = []
    commits = 0
    death = _ExpandStats(grew=False)

    def finish(reason: TerminationReason) -> _BranchRun:
        branch.termination_reason = reason
        return _BranchRun(branch=branch, children=children, snapshots=snapshots)

    def contrast_floor() -> float | None:
        if cfg.scoring_mode != ScoringMode.RANK_BASED:
            return None
        recent = branch.points[-2 * cfg.search_depth:]
        if not recent:
            return None
        med = float(np.median([p.contrast for p in recent]))
        return cfg.min_contrast_ratio * med

    while True:
        if commits >= cfg.max_steps_per_branch:
            return finish(TerminationReason.MAX_STEPS)
        stats = _expand_frontier(vol, tree, cfg, contrast_floor())
        if stats.n_out_of_bounds + stats.n_failed + stats.n_gated > 0:
            # remember the latest drop mix so drained branches can report
            # why their frontier died
            death = stats
        if stats.grew and tree.depth() < cfg.search_depth:
            continue
        if not stats.grew and tree.depth() == 0:
            # nothing beyond the committed root remains; attribute the end
            # to whatever dominated the frontier's final drops
            if (death.n_out_of_bounds >= death.n_failed
                    and death.n_out_of_bounds >= death.n_gated
                    and death.n_out_of_bounds > 0):
                return finish(TerminationReason.OUT_OF_BOUNDS)
            if death.n_gated >= death.n_failed and death.n_gated > 0:
                # continuation contrast collapsed: no acceptable hypotheses
                return finish(TerminationReason.BELOW_GLOBAL_THRESHOLD)
            return finish(TerminationReason.FIT_FAILURE)
        committed = tree.decide_and_commit()
        if committed is None:
            return finish(TerminationReason.BELOW_GLOBAL_THRESHOLD)
        point = BranchPoint.from_node(committed)
        if not (cfg.r_min - 1e-9 <= point.radius <= cfg.r_max + 1e-9):
            return finish(TerminationReason.RADIUS_OUT_OF_RANGE)
        if _revisits(branch, point, task):
            return finish(TerminationReason.REVISITED_TERRITORY)
        branch.points.append(point)
        commits += 1
        if collect_snapshots:
            snapshots.append(tree.to_json_dict())
        # cluster the current step's hypotheses: the deepest leaf level.
        # Hypotheses pointing back along the committed direction are real
        # tube fits (the tube behind scores well) but not continuations, so
        # they are excluded from branching decisions.
        depth_now = tree.depth()
        root_dir = tree.root.fit.template.direction
        frontier_leaves = [
            n for n in tree.leaves()
            if n.depth == depth_now and n.depth >= 1
            and float(n.fit.template.direction @ root_dir) > 0.0
        ]
        split = detect_bifurcation(frontier_leaves,
                                   cfg.bifurcation_separation_factor,
                                   axis=root_dir)
        if split is None:
            continue
        leaf_a, leaf_b = split
        if leaf_b.raw_score > leaf_a.raw_score:
            leaf_a, leaf_b = leaf_b, leaf_a
        # the two winning lineages usually still trace the same tube for a
        # while (the split is detected several steps ahead of the commits);
        # commit that shared stretch into this branch so the junction sits
        # where the histories spatially separate for good, then hand each
        # child the remainder of its lineage as inherited history. The last
        # same-tube-close pair marks the fork: a lineage may briefly thread
        # the sibling daughter's mouth before veering off, so the first
        # separated pair would place the junction too early or too late.
        path_a = leaf_a.path_from_root()
        path_b = leaf_b.path_from_root()
        limit = min(len(path_a), len(path_b))
        fork = -1
        for i in range(limit):
            na, nb = path_a[i], path_b[i]
            if na is nb:
                fork = i
                continue
            gap = float(np.linalg.norm(na.fit.template.center
                                       - nb.fit.template.center))
            if gap <= 0.5 * (na.fit.template.radius + nb.fit.template.radius):
                fork = i
        shared = min(fork + 1, limit - 1)
        for node in path_a[:shared]:
            point = BranchPoint.from_node(node)
            if _revisits(branch, point, task):
                return finish(TerminationReason.REVISITED_TERRITORY)
            tree.commit_node(node)
            branch.points.append(point)
            commits += 1
        if collect_snapshots and shared:
            snapshots.append(tree.to_json_dict())
        own_centers = np.asarray([p.position for p in branch.points])
        own_radii = np.asarray([p.radius for p in branch.points])
        if task.ancestor_centers is not None and task.ancestor_centers.size:
            anc_centers = np.concatenate([task.ancestor_centers, own_centers])
            anc_radii = np.concatenate([task.ancestor_radii, own_radii])
        else:
            anc_centers, anc_radii = own_centers, own_radii
        junction = tree.root  # last committed state
        for child_index, chain in enumerate((path_a[shared:], path_b[shared:])):
            if cfg.scoring_mode == ScoringMode.RANK_BASED:
                child_tree = HypothesisTree.from_chain(
                    junction, chain, cfg.search_depth, cfg.scoring_mode,
                    cfg.global_threshold, cfg.local_threshold,
                )
                anchor = branch.points[-1]
            else:
                child_tree = HypothesisTree(
                    chain[-1].fit, cfg.search_depth, cfg.scoring_mode,
                    cfg.global_threshold, cfg.local_threshold,
                )
                anchor = None  # restart: the chain begins at the new seed
            children.append(_BranchTask(
                path=branch.path + (child_index,),
                parent_path=branch.path,
                tree=child_tree,
                anchor=anchor,
                ancestor_centers=anc_centers,
                ancestor_radii=anc_radii,
            ))
        return finish(TerminationReason.BIFURCATED)


def _seed_fit(vol: Volume3D, seed: np.ndarray, seed_dir, cfg: TrackerConfig,
              seed_radius: float | None) -> FitResult:
    if not vol.contains(seed):
        raise SeedFitFailed(f"seed {seed.tolist()} outside the volume")
    r0 = seed_radius if seed_radius is not None else 0.5 * (cfg.r_min + cfg.r_max)
    r0 = min(max(r0, cfg.r_min), cfg.r_max)
    fitcfg = cfg.fit_config()
    if seed_dir is not None:
        trials = [unit(np.asarray(seed_dir, dtype=float))]
    else:
        trials = [np.array(v, dtype=float)
                  for v in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                            (0, -1, 0), (0, 0, 1), (0, 0, -1))]
    best: FitResult | None = None
    for d in trials:
        init = TubeTemplate(center=seed, direction=d, radius=r0, gamma=cfg.gamma)
        try:
            fit = fit_template(vol, init, fitcfg)
        except FitFailed:
            continue
        if best is None or fit.t_stat > best.t_stat:
            best = fit
    if best is None:
        raise SeedFitFailed("template fit failed for every trial direction")
    return best


def _dedup_pass(branches: list[Branch]) -> list[Branch]:
    """Truncate territory revisits, deterministically.

    Branches are processed in path order; a point landing inside the fitted
    sphere of a point committed by another branch truncates it there.
    Exemptions: a branch's own points, the anchor (it belongs to the
    parent), and anything within the junction neighborhood (a few anchor
    radii), where children legitimately share the parent lumen and each
    other's mouths. Beyond that, entering claimed territory means the
    branch turned back on the tree or re-tracked a sibling. Descendants of
    a truncated branch are dropped since they attached at its (now removed)
    end. Worker scheduling cannot influence the result because the ordering
    is by spawn path alone.
    """
    by_path = {b.path: b for b in branches}
    kept: dict[tuple[int, ...], Branch] = {}
    occupied_centers: list[np.ndarray] = []
    occupied_radii: list[float] = []
    occupied_owner: list[tuple[int, ...]] = []
    for path in sorted(by_path):
        branch = by_path[path]
        if branch.parent_path is not None:
            parent = kept.get(branch.parent_path)
            if parent is None or parent.termination_reason is not TerminationReason.BIFURCATED:
                continue  # parent dropped or truncated before the junction
        anchor = branch.points[0]
        junction_radius = _JUNCTION_BALL * max(anchor.radius, 1e-6)
        cut = None
        if occupied_centers:
            occ = np.asarray(occupied_centers)
            occ_r = np.asarray(occupied_radii)
            for idx, point in enumerate(branch.points):
                if idx == 0:
                    continue
                if (np.linalg.norm(point.position - anchor.position)
                        <= junction_radius):
                    continue  # junction neighborhood: shared lumen is fine
                d2 = np.einsum("ij,ij->i", occ - point.position, occ - point.position)
                hits = np.where(d2 <= occ_r * occ_r)[0]
                if any(occupied_owner[h] != branch.path for h in hits):
                    cut = idx
                    break
        if cut is not None:
            branch.points = branch.points[:cut]
            branch.termination_reason = TerminationReason.REVISITED_TERRITORY
        if not branch.points:
            continue
        kept[path] = branch
        for idx, point in enumerate(branch.points):
            if idx == 0 and branch.parent_path is not None:
                continue  # the anchor is the parent's point, not this branch's
            occupied_centers.append(point.position)
            occupied_radii.append(point.radius)
            occupied_owner.append(path)
    return [kept[p] for p in sorted(kept)]


def track_tree(vol: Volume3D, seed, seed_dir=None,
               cfg: TrackerConfig | None = None, workers: int = 1,
               seed_radius: float | None = None,
               collect_tree_dumps: bool = False) -> TrackedTree:
    """Track a whole tube tree from one seed point.

    Breadth-first over a branch queue; each branch owns its hypothesis tree
    exclusively and reads only the shared immutable volume, so results are
    identical for any worker count (a final deterministic dedup pass
    resolves territory conflicts between branches).
    """
    cfg = cfg or TrackerConfig()
    seed = as_point(seed)
    root_fit = _seed_fit(vol, seed, seed_dir, cfg, seed_radius)
    root_tree = HypothesisTree(
        root_fit, cfg.search_depth, cfg.scoring_mode,
        cfg.global_threshold, cfg.local_threshold,
    )
    tasks = [_BranchTask(path=(0,), parent_path=None, tree=root_tree,
                         anchor=None)]
    runs: dict[tuple[int, ...], _BranchRun] = {}

    def spawnable(task: _BranchTask) -> bool:
        return len(task.path) <= MAX_BRANCH_GENERATIONS

    if workers <= 1:
        pending = list(tasks)
        while pending:
            task = pending.pop(0)
            run = _track_branch(vol, cfg, task, collect_tree_dumps)
            runs[task.path] = run
            pending.extend(c for c in run.children if spawnable(c))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_track_branch, vol, cfg, task,
                                   collect_tree_dumps): task for task in tasks}
            while futures:
                done, _ = wait(list(futures), return_when=FIRST_COMPLETED)
                for fut in done:
                    task = futures.pop(fut)
                    run = fut.result()
                    runs[task.path] = run
                    for child in run.children:
                        if spawnable(child):
                            futures[pool.submit(_track_branch, vol, cfg, child,
                                                collect_tree_dumps)] = child

    branches = [runs[p].branch for p in sorted(runs)]
    branches = _dedup_pass(branches)
    ids = {b.path: i for i, b in enumerate(
        sorted(branches, key=lambda b: (len(b.path), b.path)))}
    for b in branches:
        b.id = ids[b.path]
        b.parent_id = ids[b.parent_path] if b.parent_path in ids else None
    tree = TrackedTree(branches=branches, seed=seed)
    if collect_tree_dumps:
        tree.hypothesis_dumps = [  # type: ignore[attr-defined]
            {"branch_path": list(p), "branch_id": ids.get(p),
             "snapshots": runs[p].snapshots}
            for p in sorted(runs) if p in ids
        ]
    return tree


def extract_centerlines(tree: TrackedTree) -> CenterlineSet:
    """Per-branch point chains with radii, ordered by branch id."""
    chains = []
    for b in sorted(tree.branches, key=lambda b: b.id if b.id is not None else 0):
        pts = np.asarray([p.position for p in b.points], dtype=float)
        radii = np.asarray([p.radius for p in b.points], dtype=float)
        chains.append(Chain(points=pts, radii=radii))
    return CenterlineSet(chains=chains)
