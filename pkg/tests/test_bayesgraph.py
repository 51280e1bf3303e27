import math
import random

import pytest

from amishield.attackgraph import FactBase, atom, build_lag
from amishield.bayesgraph import (
    AND_COMBINED,
    OR_COMBINED,
    ROOT,
    BagNode,
    BayesianAttackGraph,
    CycleError,
    InconsistentEvidence,
    ParentGroup,
    TooLargeForExact,
    UnknownNode,
    lag_to_bag,
    local_cpd,
    posterior,
    sample_states,
    unconditional,
)

FOUR_FACTS = [
    atom("attackerLocated", "internet"),
    atom("hacl", "internet", "meter1", "tcp", 80),
    atom("networkServiceInfo", "meter1", "svc", "tcp", 80, "root"),
    atom("vulExists", "meter1", "cveX", "svc", "remote", "privEscalation"),
]


def chain_bag(prior=0.9, edge=0.5):
    nodes = {
        "root": BagNode("root", prior=prior),
        "child": BagNode("child", groups=(ParentGroup(("root",), (edge,)),)),
    }
    return BayesianAttackGraph(nodes)


def test_lag_to_bag_four_fact_example():
    lag = build_lag(FactBase(FOUR_FACTS))
    bag = lag_to_bag(lag, {"cveX": 8.0})
    # vulExists folded away; everything else is a variable
    assert "vulExists(meter1,cveX,svc,remote,privEscalation)" not in bag.nodes
    exec_node = bag.node("execCode(meter1,root)")
    assert exec_node.kind == AND_COMBINED
    (group,) = exec_node.groups
    assert "netAccess(meter1,tcp,80)" in group.parents
    assert group.prob == pytest.approx(0.8)
    na = bag.node("netAccess(meter1,tcp,80)")
    assert na.groups[0].prob == pytest.approx(1.0)
    assert bag.goals == ("execCode(meter1,root)",)
    # config leaves are prior-1.0 roots
    assert bag.node("hacl(internet,meter1,tcp,80)").kind == ROOT
    probs = unconditional(bag)
    assert probs["execCode(meter1,root)"] == pytest.approx(0.8)


def test_lag_without_derivations_is_roots_only():
    lag = build_lag(FactBase(FOUR_FACTS[1:3]))
    bag = lag_to_bag(lag, {})
    assert all(n.kind == ROOT for n in bag.nodes.values())


def test_parallel_derivations_become_or_combined():
    facts = FactBase(
        FOUR_FACTS
        + [atom("attackerLocated", "lan"), atom("hacl", "lan", "meter1", "tcp", 80)]
    )
    bag = lag_to_bag(build_lag(facts), {"cveX": 8.0})
    na = bag.node("netAccess(meter1,tcp,80)")
    assert na.kind == OR_COMBINED
    assert len(na.groups) == 2


def test_missing_cve_score_defaults():
    lag = build_lag(FactBase(FOUR_FACTS))
    bag = lag_to_bag(lag, {})
    (group,) = bag.node("execCode(meter1,root)").groups
    assert group.prob == pytest.approx(0.5)


def test_cpd_and_semantics():
    bag = chain_bag(prior=1.0, edge=0.8)
    cpd = local_cpd(bag, "child")
    assert cpd.prob({"root": True}) == pytest.approx(0.8)
    assert cpd.prob({"root": False}) == 0.0


def test_cpd_noisy_or():
    nodes = {
        "a": BagNode("a"),
        "b": BagNode("b"),
        "c": BagNode(
            "c",
            groups=(ParentGroup(("a",), (0.5,)), ParentGroup(("b",), (0.5,))),
        ),
    }
    bag = BayesianAttackGraph(nodes)
    cpd = local_cpd(bag, "c")
    assert cpd.prob({"a": True, "b": True}) == pytest.approx(0.75)
    assert cpd.prob({"a": True, "b": False}) == pytest.approx(0.5)
    assert cpd.prob({"a": False, "b": False}) == 0.0
    table = cpd.table()
    assert all(0.0 <= v <= 1.0 for v in table.values())


def test_cpd_noisy_or_monotone_in_parents():
    rng = random.Random(1)
    for _ in range(50):
        probs = [rng.random() for _ in range(4)]
        nodes = {f"p{i}": BagNode(f"p{i}") for i in range(4)}
        nodes["c"] = BagNode(
            "c", groups=tuple(ParentGroup((f"p{i}",), (probs[i],)) for i in range(4))
        )
        cpd = local_cpd(BayesianAttackGraph(nodes), "c")
        assign = {f"p{i}": rng.random() < 0.5 for i in range(4)}
        base = cpd.prob(assign)
        for i in range(4):
            if not assign[f"p{i}"]:
                more = dict(assign)
                more[f"p{i}"] = True
                assert cpd.prob(more) >= base - 1e-12


def test_unknown_node_raises():
    with pytest.raises(UnknownNode):
        local_cpd(chain_bag(), "nope")


def test_chain_unconditional_exact():
    probs = unconditional(chain_bag(0.9, 0.5))
    assert probs["child"] == pytest.approx(0.45)
    assert probs["root"] == pytest.approx(0.9)


def test_all_certain_chain():
    nodes = {
        "r": BagNode("r", prior=1.0),
        "m": BagNode("m", groups=(ParentGroup(("r",), (1.0,)),)),
        "g": BagNode("g", groups=(ParentGroup(("m",), (1.0,)),)),
    }
    probs = unconditional(BayesianAttackGraph(nodes))
    assert all(p == pytest.approx(1.0) for p in probs.values())


def test_monte_carlo_close_to_exact_on_chain():
    bag = chain_bag(0.9, 0.5)
    mc = unconditional(bag, method="mc", samples=100_000, seed=3)
    assert mc["child"] == pytest.approx(0.45, abs=0.01)


def random_dag_bag(rng, max_nodes=12):
    n = rng.randint(2, max_nodes)
    nodes = {}
    for i in range(n):
        name = f"n{i}"
        parents = [f"n{j}" for j in range(i) if rng.random() < 0.4]
        rng.shuffle(parents)
        if not parents or rng.random() < 0.25:
            nodes[name] = BagNode(name, prior=rng.choice([1.0, rng.random()]))
        else:
            k = rng.randint(1, min(3, len(parents)))
            groups = []
            used = 0
            while used < len(parents) and len(groups) < k:
                take = rng.randint(1, min(2, len(parents) - used))
                ps = tuple(parents[used : used + take])
                groups.append(ParentGroup(ps, tuple(rng.random() for _ in ps)))
                used += take
            nodes[name] = BagNode(name, groups=tuple(groups))
    return BayesianAttackGraph(nodes)


def test_mc_within_three_sigma_of_exact_on_random_dags():
    rng = random.Random(77)
    N = 100_000
    for trial in range(50):
        bag = random_dag_bag(rng)
        exact = unconditional(bag, method="exact")
        mc = unconditional(bag, method="mc", samples=N, seed=1000 + trial)
        for node, p in exact.items():
            sigma = math.sqrt(max(p * (1 - p), 1e-12) / N)
            assert abs(mc[node] - p) <= max(3 * sigma, 5e-4), (trial, node)


def test_exact_cap_enforced():
    nodes = {f"r{i}": BagNode(f"r{i}", prior=0.5) for i in range(21)}
    bag = BayesianAttackGraph(nodes)
    with pytest.raises(TooLargeForExact):
        unconditional(bag, method="exact")
    # auto falls back to sampling
    probs = unconditional(bag, samples=2000, seed=0)
    assert len(probs) == 21


def test_posterior_empty_evidence_matches_unconditional():
    bag = chain_bag(0.9, 0.5)
    assert posterior(bag, {}) == pytest.approx(unconditional(bag))


def test_posterior_child_true_implies_root():
    post = posterior(chain_bag(0.9, 0.5), {"child": True})
    assert post["root"] == pytest.approx(1.0)


def test_posterior_bayes_rule_by_hand():
    # root prior 0.9, edge 0.5: Pr(root | child false) =
    # 0.9*0.5 / (0.9*0.5 + 0.1) by direct Bayes arithmetic
    post = posterior(chain_bag(0.9, 0.5), {"child": False})
    assert post["root"] == pytest.approx(0.45 / 0.55)


def test_posterior_inconsistent_evidence():
    nodes = {
        "r": BagNode("r", prior=1.0),
        "c": BagNode("c", groups=(ParentGroup(("r",), (1.0,)),)),
    }
    bag = BayesianAttackGraph(nodes)
    with pytest.raises(InconsistentEvidence):
        posterior(bag, {"c": False})


def test_cycles_rejected_by_constructor():
    nodes = {
        "a": BagNode("a", groups=(ParentGroup(("b",), (0.5,)),)),
        "b": BagNode("b", groups=(ParentGroup(("a",), (0.5,)),)),
    }
    with pytest.raises(CycleError):
        BayesianAttackGraph(nodes)


def test_pivot_cycle_broken_deterministically():
    # two mutually reachable hosts: pivot rules close a loop in the LAG
    facts = FactBase(
        [
            atom("attackerLocated", "internet"),
            atom("hacl", "internet", "a", "tcp", 80),
            atom("hacl", "a", "b", "tcp", 80),
            atom("hacl", "b", "a", "tcp", 80),
            atom("networkServiceInfo", "a", "sa", "tcp", 80, "root"),
            atom("networkServiceInfo", "b", "sb", "tcp", 80, "root"),
            atom("vulExists", "a", "cveA", "sa", "remote", "privEscalation"),
            atom("vulExists", "b", "cveB", "sb", "remote", "privEscalation"),
        ]
    )
    lag = build_lag(facts)
    bag1 = lag_to_bag(lag, {"cveA": 8.0, "cveB": 6.0})
    bag2 = lag_to_bag(lag, {"cveA": 8.0, "cveB": 6.0})
    assert bag1.removed_groups == bag2.removed_groups
    assert len(bag1.removed_groups) >= 1
    assert bag1.order  # topological sort succeeded
    probs = unconditional(bag1)
    assert 0.0 < probs["execCode(b,root)"] <= 1.0


def test_sample_states_columns_follow_order():
    bag = chain_bag(1.0, 1.0)
    draws = sample_states(bag, 10, seed=0)
    assert draws.shape == (10, 2)
    assert draws.all()


def test_bag_json_round_trip():
    lag = build_lag(FactBase(FOUR_FACTS))
    bag = lag_to_bag(lag, {"cveX": 8.0})
    doc = bag.to_json()
    back = BayesianAttackGraph.from_json(doc)
    assert unconditional(back) == pytest.approx(unconditional(bag))
    assert back.goals == bag.goals
    assert "digraph" in bag.to_dot()
