"""Online intrusion-response planning over a Bayesian attack graph.

The defense problem is a POMDP: the hidden state is the set of
compromised conditions, transitions fire enabled exploit edges
independently each step (the attacker never loses a capability),
observations are per-condition IDS alert bits, and actions are "do
nothing" or "apply one of the candidate firewall-rule sets", which
permanently disables every derivation crossing a denied link. The
reward trades the cost of a reached goal against the availability cost
of blocked links.

plan() runs Partially Observable Monte-Carlo Planning: UCT search over
action/observation histories, sampling start states from a particle
belief, with uniform-random rollouts that are shaped by how close the
attacker is to a goal. Everything is seeded and bit-reproducible.

States are integer bitmasks over the model's condition order, so the
simulator inner loop stays allocation-free.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace

from .attackgraph import Atom, parse_atom
from .bayesgraph import BayesianAttackGraph
from .mitigate import FirewallRule


class PlannerError(Exception):
    pass


class NoGoals(PlannerError):
    """The attack graph exposes no code-execution condition to defend."""


@dataclass(frozen=True)
class Costs:
    goal_cost: float = 100.0  # charged when a goal condition first turns true
    edge_cost: float = 1.0  # per newly blocked link, at application time
    discount: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must be in (0,1)")
        if self.goal_cost <= 0 or self.edge_cost < 0:
            raise ValueError("goal cost must be positive, edge cost non-negative")


@dataclass(frozen=True)
class ObsParams:
    p_detect: float = 0.9
    p_false: float = 0.05

    def __post_init__(self):
        if not (0.0 <= self.p_detect <= 1.0 and 0.0 <= self.p_false <= 1.0):
            raise ValueError("detection probabilities must lie in [0,1]")


@dataclass(frozen=True)
class DefenderAction:
    kind: str  # no-op | apply
    ruleset: frozenset = frozenset()

    def __post_init__(self):
        if self.kind == "apply" and not self.ruleset:
            raise ValueError("apply actions need a non-empty rule set")

    def describe(self) -> str:
        if self.kind == "no-op":
            return "no-op"
        return "apply{" + "; ".join(sorted(r.text() for r in self.ruleset)) + "}"


NO_OP = DefenderAction("no-op")


@dataclass(frozen=True)
class BeliefState:
    """Particle multiset over compromise states plus active rules."""

    particles: tuple[int, ...]
    applied_rules: tuple[frozenset, ...] = ()
    blocked_mask: int = 0
    reinitialized: bool = False

    def __post_init__(self):
        if not self.particles:
            raise ValueError("belief needs at least one particle")

    def occupancy(self, bit: int) -> float:
        """Fraction of particles with the given condition bit set."""
        return sum(1 for p in self.particles if p & bit) / len(self.particles)


@dataclass
class DefenseModel:
    """Generative POMDP compiled from a BAG and mitigation candidates."""

    conditions: tuple[str, ...]
    index: dict[str, int]
    goal_mask: int
    static_mask: int  # configuration roots: gate derivations, never "hops"
    root_priors: tuple[tuple[int, float], ...]  # (bit, prior) per root
    derived_groups: tuple[tuple[int, tuple[tuple[int, float], ...]], ...]
    actions: tuple[DefenderAction, ...]
    action_masks: tuple[int, ...]
    costs: Costs = field(default_factory=Costs)
    obs: ObsParams = field(default_factory=ObsParams)
    attack_mode: str = "all"  # all: every enabled edge fires; one: a single attempt
    particle_count: int = 1000
    rollout_depth: int = 20
    ucb_c: float | None = None  # default sqrt(2) * goal_cost
    shaping: bool = True

    @property
    def n(self) -> int:
        return len(self.conditions)

    @property
    def exploration(self) -> float:
        return self.ucb_c if self.ucb_c is not None else math.sqrt(2.0) * self.costs.goal_cost

    def bit(self, condition: str) -> int:
        return 1 << self.index[condition]

    def initial_true_mask(self, exclude_mask: int = 0) -> int:
        mask = 0
        for bit, prior in self.root_priors:
            if prior >= 1.0:
                mask |= bit
        return mask & ~exclude_mask

    def sample_state(self, rng, blocked: int = 0, exclude_mask: int = 0) -> int:
        """Forward-sample a joint compromise state from the graph."""
        mask = 0
        for bit, prior in self.root_priors:
            if bit & (blocked | exclude_mask):
                continue
            if prior >= 1.0 or rng.random() < prior:
                mask |= bit
        for bit, groups in self.derived_groups:
            if bit & exclude_mask:
                continue
            fail = 1.0
            for pmask, prob in groups:
                if pmask & ~mask:
                    continue
                fail *= 1.0 - prob
            if fail < 1.0 and rng.random() < 1.0 - fail:
                mask |= bit
        return mask


def _rules_mask(model_index, condition_atoms, ruleset) -> int:
    mask = 0
    for cond, a in condition_atoms.items():
        if a is not None and a.predicate == "hacl" and any(r.matches(a) for r in ruleset):
            mask |= 1 << model_index[cond]
    return mask


def build_pomdp(
    bag: BayesianAttackGraph,
    rule_candidates,
    costs: Costs | None = None,
    obs: ObsParams | None = None,
    goals=None,
    **knobs,
) -> DefenseModel:
    """Compile a BAG plus mitigation candidates into a DefenseModel.

    rule_candidates is an iterable of firewall-rule sets (typically the
    mitigator's enumeration for each goal); the action set is no-op plus
    one apply action per distinct candidate. goals narrows the defended
    conditions, defaulting to every execCode node in the graph.
    """
    conditions = tuple(bag.order)
    index = {c: i for i, c in enumerate(conditions)}

    if goals is None:
        goals = [g for g in bag.goals if g in index]
        if not goals:
            goals = [c for c in conditions if c.startswith("execCode(")]
    else:
        goals = [str(g) for g in goals if str(g) in index]
    if not goals:
        raise NoGoals("attack graph has no execCode condition")
    goal_mask = 0
    for g in goals:
        goal_mask |= 1 << index[g]

    atoms = {}
    for c in conditions:
        a = bag.nodes[c].atom
        if a is None:
            try:
                a = parse_atom(c)
            except Exception:
                a = None
        atoms[c] = a

    root_priors = []
    derived_groups = []
    static_mask = 0
    for c in conditions:
        node = bag.nodes[c]
        bit = 1 << index[c]
        if not node.groups:
            root_priors.append((bit, float(node.prior)))
            a = atoms[c]
            if a is None or a.predicate != "attackerLocated":
                static_mask |= bit
        else:
            glist = tuple(
                (sum(1 << index[p] for p in set(g.parents)), g.prob) for g in node.groups
            )
            derived_groups.append((bit, glist))

    seen = set()
    actions = [NO_OP]
    masks = [0]
    for cand in rule_candidates:
        rs = frozenset(cand)
        if not rs or rs in seen:
            continue
        seen.add(rs)
        actions.append(DefenderAction("apply", rs))
        masks.append(_rules_mask(index, atoms, rs))
    order = sorted(range(1, len(actions)), key=lambda i: (len(actions[i].ruleset), actions[i].describe()))
    actions = tuple([actions[0]] + [actions[i] for i in order])
    masks = tuple([masks[0]] + [masks[i] for i in order])

    return DefenseModel(
        conditions=conditions,
        index=index,
        goal_mask=goal_mask,
        static_mask=static_mask,
        root_priors=tuple(root_priors),
        derived_groups=tuple(derived_groups),
        actions=actions,
        action_masks=masks,
        costs=costs or Costs(),
        obs=obs or ObsParams(),
        **knobs,
    )


def _advance(model: DefenseModel, true: int, blocked: int, rng) -> int:
    """One attacker round: fire enabled derivations from the pre-state."""
    new_true = true
    if model.attack_mode == "all":
        for bit, groups in model.derived_groups:
            if true & bit:
                continue
            for pmask, prob in groups:
                if (pmask & ~true) or (pmask & blocked):
                    continue
                if prob >= 1.0 or rng.random() < prob:
                    new_true |= bit
                    break
    else:
        enabled = []
        for bit, groups in model.derived_groups:
            if true & bit:
                continue
            for pmask, prob in groups:
                if not (pmask & ~true) and not (pmask & blocked):
                    enabled.append((bit, prob))
        if enabled:
            bit, prob = enabled[int(rng.random() * len(enabled))]
            if prob >= 1.0 or rng.random() < prob:
                new_true |= bit
    return new_true


def _apply_action(model, true, blocked, action_idx):
    """Returns (true, blocked, availability penalty)."""
    mask = model.action_masks[action_idx]
    newly = mask & ~blocked
    if not newly:
        return true, blocked, 0.0
    blocked |= newly
    return true & ~blocked, blocked, -model.costs.edge_cost * newly.bit_count()


def simulate_step(model: DefenseModel, state, action, rng):
    """Full generative step: (state, action) -> (state', observation, reward).

    state is (true_mask, blocked_mask); the observation has one bit per
    condition: newly-true conditions alert with p_detect, still-false
    ones with p_false, previously-true ones stay silent.
    """
    true, blocked = state
    if isinstance(action, DefenderAction):
        action_idx = model.actions.index(action)
    else:
        action_idx = action
    true, blocked, reward = _apply_action(model, true, blocked, action_idx)
    new_true = _advance(model, true, blocked, rng)
    newly = new_true & ~true

    obs = 0
    pd, pf = model.obs.p_detect, model.obs.p_false
    bit = 1
    for _ in range(model.n):
        if newly & bit:
            if rng.random() < pd:
                obs |= bit
        elif not (new_true & bit):
            if rng.random() < pf:
                obs |= bit
        bit <<= 1

    reward -= model.costs.goal_cost * (newly & model.goal_mask).bit_count()
    return (new_true, blocked), obs, reward


def observation_likelihood(model, prev_true, new_true, obs) -> float:
    """Pr(obs | transition prev_true -> new_true) under the alert channel."""
    newly = new_true & ~prev_true
    pd, pf = model.obs.p_detect, model.obs.p_false
    w = 1.0
    bit = 1
    for _ in range(model.n):
        o = obs & bit
        if newly & bit:
            w *= pd if o else 1.0 - pd
        elif not (new_true & bit):
            w *= pf if o else 1.0 - pf
        elif o:
            return 0.0  # alerts are edge-triggered; an old compromise is silent
        bit <<= 1
    return w


def initial_belief(model: DefenseModel, exclude_mask: int = 0) -> BeliefState:
    start = model.initial_true_mask(exclude_mask)
    return BeliefState(particles=(start,) * model.particle_count)


def update_belief(
    belief: BeliefState,
    action: DefenderAction,
    observation: int,
    model: DefenseModel,
    rng=None,
) -> BeliefState:
    """Particle filter step: propagate, weight by the alert bits, resample.

    If every particle is inconsistent with the observation the belief is
    reinitialized from the graph's unconditional distribution and the
    event is flagged on the returned state.
    """
    rng = rng or random.Random(0)
    action_idx = model.actions.index(action) if isinstance(action, DefenderAction) else action
    applied = belief.applied_rules
    if model.actions[action_idx].kind == "apply":
        applied = applied + (model.actions[action_idx].ruleset,)
    blocked = belief.blocked_mask | model.action_masks[action_idx]

    moved = []
    weights = []
    for p in belief.particles:
        prev = p & ~blocked
        nxt = _advance(model, prev, blocked, rng)
        w = observation_likelihood(model, prev, nxt, observation)
        if w > 0.0:
            moved.append(nxt)
            weights.append(w)

    n = model.particle_count
    if not moved:
        particles = tuple(model.sample_state(rng, blocked) & ~blocked for _ in range(n))
        return BeliefState(particles, applied, blocked, reinitialized=True)

    total = sum(weights)
    cum = []
    acc = 0.0
    for w in weights:
        acc += w
        cum.append(acc)
    particles = []
    for _ in range(n):
        u = rng.random() * total
        lo, hi = 0, len(cum) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if cum[mid] < u:
                lo = mid + 1
            else:
                hi = mid
        particles.append(moved[lo])
    return BeliefState(tuple(particles), applied, blocked, reinitialized=False)


def goal_proximity_weight(true_mask: int, model: DefenseModel, blocked: int = 0) -> float:
    """1/(1+d) where d is the shortest remaining hop count to any goal.

    A hop follows a derivation from an attacker capability (a derived
    condition or the attacker's location) to its child; configuration
    roots only gate whether the derivation is usable. d counts single
    parent-to-child edges, an optimistic relaxation of the AND semantics
    used only to shape rollout values. 1 if a goal is already true, 0
    when no goal is reachable through unblocked derivations.
    """
    if true_mask & model.goal_mask:
        return 1.0
    static = model.static_mask
    visited = true_mask & ~static
    frontier = visited
    d = 0
    while True:
        d += 1
        nxt = 0
        for bit, groups in model.derived_groups:
            if (visited | true_mask) & bit or blocked & bit:
                continue
            for pmask, prob in groups:
                if prob <= 0.0 or pmask & blocked:
                    continue
                if (pmask & static) & ~true_mask:
                    continue  # a required configuration fact is absent
                prog = pmask & ~static
                if (prog == 0 and d == 1) or (prog & frontier):
                    nxt |= bit
                    break
        if nxt & model.goal_mask:
            return 1.0 / (1.0 + d)
        if not nxt:
            return 0.0
        visited |= nxt
        frontier = nxt


class _Node:
    __slots__ = ("n", "counts", "values", "children")

    def __init__(self, n_actions):
        self.n = 0
        self.counts = [0] * n_actions
        self.values = [0.0] * n_actions
        self.children = {}


def _rollout(model, true, blocked, depth, rng):
    gamma = model.costs.discount
    edge_cost = model.costs.edge_cost
    goal_cost = model.costs.goal_cost
    goal_mask = model.goal_mask
    masks = model.action_masks
    n_actions = len(masks)
    total = 0.0
    g = 1.0
    while depth < model.rollout_depth:
        a = int(rng.random() * n_actions)
        r = 0.0
        newly_blocked = masks[a] & ~blocked
        if newly_blocked:
            blocked |= newly_blocked
            true &= ~blocked
            r -= edge_cost * newly_blocked.bit_count()
        new_true = _advance(model, true, blocked, rng)
        r -= goal_cost * ((new_true & ~true) & goal_mask).bit_count()
        true = new_true
        total += g * r
        g *= gamma
        depth += 1
    if model.shaping and not (true & goal_mask):
        total -= g * goal_cost * goal_proximity_weight(true, model, blocked)
    return total


def _simulate(model, true, blocked, node, depth, rng, c, gamma):
    if depth >= model.rollout_depth:
        return 0.0
    if node.n == 0:
        node.n = 1
        return _rollout(model, true, blocked, depth, rng)

    counts = node.counts
    best, best_score = 0, -math.inf
    log_n = math.log(node.n)
    for a in range(len(counts)):
        if counts[a] == 0:
            best = a
            break
        score = node.values[a] + c * math.sqrt(log_n / counts[a])
        if score > best_score:
            best, best_score = a, score
    (s_true, s_blocked), obs, r = simulate_step(model, (true, blocked), best, rng)
    key = (best, obs)
    child = node.children.get(key)
    if child is None:
        child = node.children[key] = _Node(len(counts))
    q = r + gamma * _simulate(model, s_true, s_blocked, child, depth + 1, rng, c, gamma)
    node.n += 1
    counts[best] += 1
    node.values[best] += (q - node.values[best]) / counts[best]
    return q


def plan_with_stats(model: DefenseModel, belief: BeliefState, budget: int = 1000, seed: int = 0):
    """POMCP search; returns (action, per-action visit/value stats)."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = random.Random(seed)
    root = _Node(len(model.actions))
    root.n = 1  # root is expanded by construction
    particles = belief.particles
    blocked = belief.blocked_mask
    c = model.exploration
    gamma = model.costs.discount
    for _ in range(budget):
        start = particles[int(rng.random() * len(particles))] & ~blocked
        _simulate(model, start, blocked, root, 0, rng, c, gamma)

    best, best_value = 0, -math.inf
    for a in range(len(model.actions)):
        if root.counts[a] and root.values[a] > best_value:
            best, best_value = a, root.values[a]
    stats = {
        model.actions[a].describe(): {"visits": root.counts[a], "value": root.values[a]}
        for a in range(len(model.actions))
    }
    return model.actions[best], stats


def plan(model: DefenseModel, belief: BeliefState, budget: int = 1000, seed: int = 0) -> DefenderAction:
    """Best root action under POMCP with the given simulation budget."""
    action, _ = plan_with_stats(model, belief, budget, seed)
    return action
