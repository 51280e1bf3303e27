"""Exact finite-horizon value iteration over a DefenseModel's MDP.

With a noiseless alert channel (p_detect=1, p_false=0) and a point-mass
initial belief, the planning POMDP collapses to the fully observable
MDP over (true_mask, blocked_mask), which this oracle solves exactly by
enumerating independent group firings. Used to check POMCP's root
action choice on enumerable toy models.
"""

import itertools
from functools import lru_cache


def transitions(model, state, action_idx):
    """All (probability, next_state, reward) triples for one step."""
    true, blocked = state
    reward0 = 0.0
    mask = model.action_masks[action_idx]
    newly_blocked = mask & ~blocked
    if newly_blocked:
        blocked |= newly_blocked
        true &= ~blocked
        reward0 -= model.costs.edge_cost * newly_blocked.bit_count()

    candidates = []
    for bit, groups in model.derived_groups:
        if true & bit:
            continue
        fail = 1.0
        satisfied = False
        for pmask, prob in groups:
            if (pmask & ~true) or (pmask & blocked):
                continue
            satisfied = True
            fail *= 1.0 - prob
        if satisfied and fail < 1.0:
            candidates.append((bit, 1.0 - fail))

    out = []
    for fired in itertools.product([False, True], repeat=len(candidates)):
        prob = 1.0
        new_true = true
        for (bit, p), f in zip(candidates, fired):
            prob *= p if f else 1.0 - p
            if f:
                new_true |= bit
        if prob == 0.0:
            continue
        reward = reward0 - model.costs.goal_cost * ((new_true & ~true) & model.goal_mask).bit_count()
        out.append((prob, (new_true, blocked), reward))
    return out


def optimal_action(model, state, horizon):
    """Index and Q-values of the best first action over the horizon."""
    gamma = model.costs.discount

    @lru_cache(maxsize=None)
    def value(state, h):
        if h == 0:
            return 0.0
        return max(q(state, a, h) for a in range(len(model.actions)))

    def q(state, a, h):
        total = 0.0
        for prob, nxt, reward in transitions(model, state, a):
            total += prob * (reward + gamma * value(nxt, h - 1))
        return total

    qs = [q(state, a, horizon) for a in range(len(model.actions))]
    best = max(range(len(qs)), key=lambda a: qs[a])
    return best, qs
