"""Hypothesis tree: rank scoring, global scores, deferred commits, pruning.

A tree holds one committed anchor (the root) plus candidate continuations up
to a search depth. Decisions trace back the best path at the deepest level
currently present, commit only its first step and prune everything else.
Sibling sets are scored either by the raw contrast t-statistic thresholded
locally (original mode) or by relative rank in [0, 1] with no local
threshold (rank mode).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

from .fitting import FitResult


class EmptyHypothesisSet(Exception):
    """Ranking requested for an empty sibling list."""


class ScoringMode(str, Enum):
    ORIGINAL_SNR = "original_snr"
    RANK_BASED = "rank_based"


@dataclass(eq=False)
class LocalHypothesis:
    """One fitted tube at one tracking step, a node of the hypothesis tree."""

    fit: FitResult
    raw_score: float
    step_index: int = 0
    parent: "LocalHypothesis | None" = None
    rank_score: float | None = None
    children: list["LocalHypothesis"] = field(default_factory=list)
    depth: int = 0
    seq: int = -1
    exhausted: bool = False

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def path_from_root(self) -> list["LocalHypothesis"]:
        """Nodes from the root child down to this node (root excluded)."""
        path: list[LocalHypothesis] = []
        node: LocalHypothesis | None = self
        while node is not None and node.parent is not None:
            path.append(node)
            node = node.parent
        path.reverse()
        return path


def rank_siblings(hyps: list[LocalHypothesis]) -> list[LocalHypothesis]:
    """Assign relative rank scores in [0, 1] to one sibling set.

    Sorted descending by raw score, the best of N gets 1 and the worst 0,
    linearly in between: (N - rank) / (N - 1). A singleton gets 1. Raw-score
    ties break toward the smaller fitted radius, then toward earlier list
    position, so the output is a deterministic function of the input.
    """
    if not hyps:
        raise EmptyHypothesisSet("cannot rank an empty hypothesis list")
    n = len(hyps)
    if n == 1:
        hyps[0].rank_score = 1.0
        return hyps
    order = sorted(
        range(n),
        key=lambda i: (-hyps[i].raw_score, hyps[i].fit.template.radius, i),
    )
    for rank, idx in enumerate(order, start=1):
        hyps[idx].rank_score = (n - rank) / (n - 1)
    return hyps


@dataclass(frozen=True)
class GlobalHypothesis:
    """A root-to-leaf path (root excluded) with its depth."""

    path: tuple[LocalHypothesis, ...]
    leaf_depth: int


def global_score(ghyp: GlobalHypothesis, mode: ScoringMode) -> float:
    """Mean per-step score along the path (raw or rank depending on mode)."""
    if not ghyp.path:
        raise EmptyHypothesisSet("global score of an empty path")
    if mode == ScoringMode.RANK_BASED:
        total = sum(node.rank_score if node.rank_score is not None else 0.0
                    for node in ghyp.path)
    else:
        total = sum(node.raw_score for node in ghyp.path)
    return total / ghyp.leaf_depth


class HypothesisTree:
    """Candidate continuations of one tracked branch up to ``search_depth``.

    The root is the last committed state; its score never enters global
    scores. Trees are confined to one branch task; ``clone_chain`` hands a
    copy of one lineage to a child branch at a bifurcation.
    """

    def __init__(self, root_fit: FitResult, search_depth: int,
                 scoring_mode: ScoringMode = ScoringMode.RANK_BASED,
                 global_threshold: float = 0.7,
                 local_threshold: float | None = None):
        if search_depth < 1:
            raise ValueError("search depth must be >= 1")
        if scoring_mode == ScoringMode.RANK_BASED and local_threshold is not None:
            raise ValueError("rank-based scoring takes no local threshold")
        self.search_depth = int(search_depth)
        self.scoring_mode = ScoringMode(scoring_mode)
        self.global_threshold = float(global_threshold)
        self.local_threshold = local_threshold
        self._seq = 0
        self.root = LocalHypothesis(
            fit=root_fit, raw_score=root_fit.t_stat, step_index=0,
            rank_score=1.0, depth=0, seq=self._next_seq(),
        )

    def _next_seq(self) -> int:
        s = self._seq
        self._seq += 1
        return s

    # -- inspection --------------------------------------------------------

    def nodes(self) -> list[LocalHypothesis]:
        out: list[LocalHypothesis] = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            out.append(node)
            stack.extend(reversed(node.children))
        return out

    def leaves(self) -> list[LocalHypothesis]:
        return [n for n in self.nodes() if n.is_leaf]

    def depth(self) -> int:
        return max(n.depth for n in self.nodes())

    def frontier(self) -> list[LocalHypothesis]:
        """Expandable leaves: not exhausted, below search depth."""
        return [n for n in self.leaves()
                if not n.exhausted and n.depth < self.search_depth]

    # -- growth ------------------------------------------------------------

    def expand_leaf(self, leaf: LocalHypothesis,
                    candidates: list[LocalHypothesis]) -> None:
        """Attach candidate continuations under ``leaf`` and rank them.

        In original mode candidates below the local threshold are dropped
        before insertion. An empty surviving set leaves the leaf terminal.
        """
        if not leaf.is_leaf:
            raise ValueError("can only expand a leaf")
        if leaf.depth >= self.search_depth:
            raise ValueError("leaf already at search depth")
        survivors = list(candidates)
        if self.scoring_mode == ScoringMode.ORIGINAL_SNR and self.local_threshold is not None:
            survivors = [c for c in survivors if c.raw_score >= self.local_threshold]
        if not survivors:
            leaf.exhausted = True
            return
        rank_siblings(survivors)
        for cand in survivors:
            cand.parent = leaf
            cand.depth = leaf.depth + 1
            cand.step_index = leaf.step_index + 1
            cand.seq = self._next_seq()
            leaf.children.append(cand)

    def detach(self, node: LocalHypothesis) -> None:
        """Remove a node (and its subtree) from the tree."""
        if node.parent is None:
            raise ValueError("cannot detach the root")
        node.parent.children.remove(node)
        node.parent = None

    # -- decisions ---------------------------------------------------------

    def global_hypotheses(self, deepest_only: bool = True) -> list[GlobalHypothesis]:
        leaves = [n for n in self.leaves() if n.depth >= 1]
        if not leaves:
            return []
        if deepest_only:
            dmax = max(n.depth for n in leaves)
            leaves = [n for n in leaves if n.depth == dmax]
        return [GlobalHypothesis(path=tuple(leaf.path_from_root()),
                                 leaf_depth=leaf.depth)
                for leaf in leaves]

    def decide_and_commit(self) -> LocalHypothesis | None:
        """Commit the first step of the best deepest path; prune the rest.

        Competition runs over the deepest level currently present (stalled
        shallow lineages only compete once the frontier has died back to
        them). Returns the committed node, now the new root, or None when
        the best global score falls below the global threshold.
        """
        ghyps = self.global_hypotheses(deepest_only=True)
        if not ghyps:
            return None
        best = max(
            ghyps,
            key=lambda g: (global_score(g, self.scoring_mode),
                           g.leaf_depth, -g.path[-1].seq),
        )
        if global_score(best, self.scoring_mode) < self.global_threshold:
            return None
        committed = best.path[0]
        self.commit_node(committed)
        return committed

    def commit_node(self, child: LocalHypothesis) -> None:
        """Re-root at a given child of the root, pruning its siblings."""
        if child.parent is not self.root:
            raise ValueError("can only commit a direct child of the root")
        for sibling in list(self.root.children):
            if sibling is not child:
                self.detach(sibling)
        child.parent = None
        self.root = child
        for node in self.nodes():
            node.depth -= 1

    # -- bifurcation support ------------------------------------------------

    def clone_chain(self, leaf: LocalHypothesis) -> "HypothesisTree":
        """New tree holding a copy of the root-to-``leaf`` lineage only.

        The copied leaf is expandable; interior nodes keep their scores so
        the child branch inherits the decision history of its lineage.
        """
        return self.from_chain(self.root, leaf.path_from_root(),
                               self.search_depth, self.scoring_mode,
                               self.global_threshold, self.local_threshold)

    @staticmethod
    def from_chain(root: LocalHypothesis, chain: list[LocalHypothesis],
                   search_depth: int, scoring_mode: ScoringMode,
                   global_threshold: float,
                   local_threshold: float | None) -> "HypothesisTree":
        """Fresh tree from copies of a committed root plus one lineage."""
        clone = HypothesisTree.__new__(HypothesisTree)
        clone.search_depth = int(search_depth)
        clone.scoring_mode = ScoringMode(scoring_mode)
        clone.global_threshold = float(global_threshold)
        clone.local_threshold = local_threshold
        clone._seq = 0
        prev: LocalHypothesis | None = None
        for node in [root] + list(chain):
            copied = LocalHypothesis(
                fit=node.fit, raw_score=node.raw_score,
                step_index=node.step_index, parent=prev,
                rank_score=node.rank_score,
                depth=0 if prev is None else prev.depth + 1,
                seq=clone._next_seq(), exhausted=False,
            )
            if prev is None:
                clone.root = copied
            else:
                prev.children.append(copied)
            prev = copied
        return clone

    # -- debug dumps ---------------------------------------------------------

    def to_json_dict(self) -> dict:
        def encode(node: LocalHypothesis) -> dict:
            tpl = node.fit.template
            return {
                "step": node.step_index,
                "depth": node.depth,
                "raw_score": node.raw_score,
                "rank_score": node.rank_score,
                "center": [round(float(c), 6) for c in tpl.center],
                "radius": round(float(tpl.radius), 6),
                "children": [encode(c) for c in node.children],
            }

        return {
            "search_depth": self.search_depth,
            "scoring_mode": self.scoring_mode.value,
            "global_threshold": self.global_threshold,
            "local_threshold": self.local_threshold,
            "root": encode(self.root),
        }

    def to_text(self) -> str:
        lines: list[str] = []

        def walk(node: LocalHypothesis, indent: int) -> None:
            tpl = node.fit.template
            rank = "-" if node.rank_score is None else f"{node.rank_score:.3f}"
            lines.append(
                "{}step={} raw={:.4g} rank={} r={:.3f} c=({:.2f}, {:.2f}, {:.2f})".format(
                    "  " * indent, node.step_index, node.raw_score, rank,
                    tpl.radius, *tpl.center,
                )
            )
            for child in node.children:
                walk(child, indent + 1)

        walk(self.root, 0)
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)
