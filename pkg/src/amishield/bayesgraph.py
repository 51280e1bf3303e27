"""Bayesian attack graphs: probabilistic overlay on a LAG.

Every connectivity/configuration leaf and every derived fact becomes a
binary random variable; vulnerability leaves do not — they set the
success probability of the exploit edge they enable (CVE base score
scaled to [0,1]). Each rule instance collapses into one *parent group*:
the child fires only if all parents in a group are true, and a node
with several groups is compromised unless every satisfied group's
exploit independently fails (noisy-OR).

Inference is exact by weighted enumeration up to EXACT_NODE_CAP nodes
and forward Monte-Carlo beyond that.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .attackgraph import Atom, LogicalAttackGraph

log = logging.getLogger(__name__)

EXACT_NODE_CAP = 20
BAG_FORMAT_VERSION = 1

ROOT = "root"
AND_COMBINED = "AND-combined"
OR_COMBINED = "OR-combined"


class BagError(Exception):
    pass


class UnknownNode(BagError):
    pass


class CycleError(BagError):
    pass


class TooLargeForExact(BagError):
    """Exact enumeration requested above the node cap."""


class InconsistentEvidence(BagError):
    """The conditioned-on event has probability zero."""


@dataclass(frozen=True)
class ParentGroup:
    """One derivation: all parents required, joint success probability."""

    parents: tuple[str, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.parents) != len(self.probs):
            raise ValueError("parents/probs length mismatch")
        if any(not 0.0 <= p <= 1.0 for p in self.probs):
            raise ValueError("edge probabilities must lie in [0,1]")

    @property
    def prob(self) -> float:
        return math.prod(self.probs)


@dataclass
class BagNode:
    id: str
    groups: tuple[ParentGroup, ...] = ()
    prior: float = 1.0
    atom: Atom | None = None

    @property
    def kind(self) -> str:
        if not self.groups:
            return ROOT
        return AND_COMBINED if len(self.groups) == 1 else OR_COMBINED

    @property
    def parents(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for g in self.groups:
            for p in g.parents:
                seen.setdefault(p)
        return tuple(seen)


@dataclass(frozen=True)
class CPD:
    """Pr(node = 1 | parent assignment) in closed noisy-OR/product form."""

    node: str
    parents: tuple[str, ...]
    groups: tuple[ParentGroup, ...]
    prior: float

    def prob(self, assignment: dict[str, bool]) -> float:
        if not self.groups:
            return self.prior
        fail = 1.0
        for g in self.groups:
            if all(assignment.get(p, False) for p in g.parents):
                fail *= 1.0 - g.prob
        return 1.0 - fail

    def table(self) -> dict[tuple[bool, ...], float]:
        if len(self.parents) > 16:
            raise TooLargeForExact("CPD table too wide to enumerate")
        out = {}
        for bits in range(1 << len(self.parents)):
            assign = {p: bool(bits >> i & 1) for i, p in enumerate(self.parents)}
            out[tuple(assign[p] for p in self.parents)] = self.prob(assign)
        return out


class BayesianAttackGraph:
    """Acyclic set of BagNodes with per-group exploit probabilities."""

    def __init__(self, nodes: dict[str, BagNode], goals=(), removed_groups=()):
        self.nodes = dict(nodes)
        self.goals = tuple(g for g in goals if g in self.nodes)
        self.removed_groups = tuple(removed_groups)
        for node in self.nodes.values():
            for g in node.groups:
                for p in g.parents:
                    if p not in self.nodes:
                        raise UnknownNode(f"{node.id} references missing parent {p}")
        self.order = self._topo_order()

    def _topo_order(self) -> tuple[str, ...]:
        indeg = {nid: len(set(n.parents)) for nid, n in self.nodes.items()}
        children: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for nid, n in self.nodes.items():
            for p in set(n.parents):
                children[p].append(nid)
        ready = sorted(nid for nid, d in indeg.items() if d == 0)
        out = []
        while ready:
            nid = ready.pop(0)
            out.append(nid)
            for c in sorted(children[nid]):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
            ready.sort()
        if len(out) != len(self.nodes):
            raise CycleError("graph contains a directed cycle")
        return tuple(out)

    def __len__(self):
        return len(self.nodes)

    def node(self, node_id: str) -> BagNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def roots(self) -> tuple[str, ...]:
        return tuple(nid for nid in self.order if not self.nodes[nid].groups)

    def to_json(self) -> dict:
        return {
            "version": BAG_FORMAT_VERSION,
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind,
                    "prior": n.prior,
                    "groups": [
                        {"parents": list(g.parents), "probs": list(g.probs)}
                        for g in n.groups
                    ],
                }
                for nid in self.order
                for n in (self.nodes[nid],)
            ],
            "goals": list(self.goals),
            "removed_groups": [
                {"node": nid, "parents": list(ps)} for nid, ps in self.removed_groups
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "BayesianAttackGraph":
        if doc.get("version") != BAG_FORMAT_VERSION:
            raise BagError(f"unsupported BAG format version {doc.get('version')!r}")
        nodes = {}
        for nd in doc["nodes"]:
            nodes[nd["id"]] = BagNode(
                id=nd["id"],
                prior=float(nd.get("prior", 1.0)),
                groups=tuple(
                    ParentGroup(tuple(g["parents"]), tuple(float(p) for p in g["probs"]))
                    for g in nd.get("groups", [])
                ),
            )
        return cls(nodes, goals=doc.get("goals", ()))

    def to_dot(self) -> str:
        out = ["digraph bag {"]
        for nid in self.order:
            n = self.nodes[nid]
            shape = {"root": "box", AND_COMBINED: "ellipse", OR_COMBINED: "hexagon"}[n.kind]
            peri = ",peripheries=2" if nid in self.goals else ""
            out.append(f'  "{nid}" [shape={shape}{peri}];')
            for g in n.groups:
                for p, pr in zip(g.parents, g.probs):
                    out.append(f'  "{p}" -> "{nid}" [label="{pr:.2f}"];')
        out.append("}")
        return "\n".join(out) + "\n"


def local_cpd(bag: BayesianAttackGraph, node_id: str) -> CPD:
    n = bag.node(node_id)
    return CPD(node=n.id, parents=n.parents, groups=n.groups, prior=n.prior)


DEFAULT_SCORE = 5.0


def lag_to_bag(lag: LogicalAttackGraph, scores: dict[str, float] | None = None) -> BayesianAttackGraph:
    """Probabilistic overlay: LAG leaves and derived atoms become variables.

    vulExists leaves are folded into the exploit edge probability of the
    rule instances that use them (base score / 10, DEFAULT_SCORE if the
    CVE is missing from the score map). Cycles introduced by pivot rules
    are broken by dropping the parent group that closes the cycle, in
    deterministic DFS order; removals are logged and recorded.
    """
    scores = scores or {}
    node_atoms = sorted(
        a for a in (lag.leaves | lag.or_nodes) if a.predicate != "vulExists"
    )
    nodes = {str(a): BagNode(id=str(a), prior=1.0, atom=a) for a in node_atoms}

    groups: dict[str, list[ParentGroup]] = {nid: [] for nid in nodes}
    for inst in lag.and_nodes:
        head_id = str(inst.head)
        if head_id not in nodes:
            continue
        parents = [b for b in inst.body if b.predicate != "vulExists"]
        factor = 1.0
        for b in inst.body:
            if b.predicate == "vulExists":
                factor *= scores.get(b.args[1], DEFAULT_SCORE) / 10.0
        probs = [1.0] * len(parents)
        if parents:
            # attach the exploit factor to the attacker-progression edge
            target = 0
            for i, p in enumerate(parents):
                if p.predicate in ("netAccess", "execCode", "attackerLocated"):
                    target = i
                    break
            probs[target] = factor
        pg = ParentGroup(tuple(str(p) for p in parents), tuple(probs))
        if pg not in groups[head_id]:
            groups[head_id].append(pg)

    removed = _break_cycles(nodes, groups)
    built = {
        nid: BagNode(id=nid, groups=tuple(groups[nid]), prior=1.0, atom=nodes[nid].atom)
        for nid in nodes
    }
    goals = [str(a) for a in sorted(lag.goals) if str(a) in built]
    return BayesianAttackGraph(built, goals=goals, removed_groups=removed)


def _break_cycles(nodes, groups):
    """Drop parent groups that close directed cycles (deterministic DFS)."""
    removed = []
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {nid: WHITE for nid in nodes}

    def edges_out(nid):
        # children of nid: nodes with a group containing nid
        for child in sorted(groups):
            for g in list(groups[child]):
                if nid in g.parents:
                    yield child, g

    def visit(nid, stack):
        color[nid] = GRAY
        stack.add(nid)
        for child, g in list(edges_out(nid)):
            if g not in groups[child]:
                continue
            if child in stack:
                groups[child].remove(g)
                removed.append((child, g.parents))
                log.info("cycle broken: dropped derivation %s <- %s", child, g.parents)
            elif color[child] == WHITE:
                visit(child, stack)
        stack.discard(nid)
        color[nid] = BLACK

    for nid in sorted(nodes):
        if color[nid] == WHITE:
            visit(nid, set())
    return tuple(removed)


def _assignment_bits(n: int) -> np.ndarray:
    m = 1 << n
    return ((np.arange(m, dtype=np.int64)[:, None] >> np.arange(n)) & 1).astype(bool)


def _joint(bag: BayesianAttackGraph):
    """All 2^n assignments (in bag.order column order) and their weights."""
    n = len(bag)
    if n > EXACT_NODE_CAP:
        raise TooLargeForExact(f"{n} nodes exceeds the exact cap {EXACT_NODE_CAP}")
    idx = {nid: i for i, nid in enumerate(bag.order)}
    bits = _assignment_bits(n)
    joint = np.ones(1 << n)
    for nid in bag.order:
        node = bag.nodes[nid]
        if not node.groups:
            p_true = np.full(1 << n, node.prior)
        else:
            fail = np.ones(1 << n)
            for g in node.groups:
                sat = np.ones(1 << n, dtype=bool)
                for p in g.parents:
                    sat &= bits[:, idx[p]]
                fail *= np.where(sat, 1.0 - g.prob, 1.0)
            p_true = 1.0 - fail
        col = bits[:, idx[nid]]
        joint *= np.where(col, p_true, 1.0 - p_true)
    return bits, joint, idx


def unconditional(
    bag: BayesianAttackGraph,
    method: str = "auto",
    samples: int = 100_000,
    seed: int = 0,
) -> dict[str, float]:
    """Marginal compromise probability per node.

    Exact enumeration up to EXACT_NODE_CAP nodes, forward sampling above
    (or on request).
    """
    if method not in ("auto", "exact", "mc"):
        raise ValueError(f"unknown method {method!r}")
    if method == "exact" and len(bag) > EXACT_NODE_CAP:
        raise TooLargeForExact(f"{len(bag)} nodes exceeds the exact cap")
    if method == "auto":
        method = "exact" if len(bag) <= EXACT_NODE_CAP else "mc"

    if method == "exact":
        bits, joint, idx = _joint(bag)
        return {nid: float(joint[bits[:, idx[nid]]].sum()) for nid in bag.order}

    draws = sample_states(bag, samples, seed)
    return {nid: float(draws[:, i].mean()) for i, nid in enumerate(bag.order)}


def sample_states(bag: BayesianAttackGraph, samples: int, seed: int = 0) -> np.ndarray:
    """Forward-sample joint states; columns follow bag.order."""
    rng = np.random.default_rng(seed)
    idx = {nid: i for i, nid in enumerate(bag.order)}
    draws = np.zeros((samples, len(bag)), dtype=bool)
    for nid in bag.order:
        node = bag.nodes[nid]
        if not node.groups:
            p = np.full(samples, node.prior)
        else:
            fail = np.ones(samples)
            for g in node.groups:
                sat = np.ones(samples, dtype=bool)
                for par in g.parents:
                    sat &= draws[:, idx[par]]
                fail *= np.where(sat, 1.0 - g.prob, 1.0)
            p = 1.0 - fail
        draws[:, idx[nid]] = rng.random(samples) < p
    return draws


def posterior(bag: BayesianAttackGraph, evidence: dict[str, bool]) -> dict[str, float]:
    """Exact conditionals given observed node values, by enumeration."""
    for nid in evidence:
        bag.node(nid)
    bits, joint, idx = _joint(bag)
    mask = np.ones(len(joint), dtype=bool)
    for nid, val in evidence.items():
        mask &= bits[:, idx[nid]] == bool(val)
    denom = float(joint[mask].sum())
    if denom <= 0.0:
        raise InconsistentEvidence("evidence has probability zero")
    return {
        nid: float(joint[mask & bits[:, idx[nid]]].sum()) / denom for nid in bag.order
    }
