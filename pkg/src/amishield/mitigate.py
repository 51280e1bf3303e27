"""Firewall-rule synthesis: cutting attack paths in a LAG.

Starting from a goal condition the builder walks depth-first toward the
graph's leaves. A derived fact is blocked only if *every* derivation of
it is cut (ALL-of); a rule instance is cut if *any* of its preconditions
is blocked (ANY-of); the only directly cuttable preconditions are hacl
connectivity leaves, which map one-to-one onto deny rules. The result
is a connective tree whose satisfying assignments are exactly the rule
sets that sever the goal, enumerable in order of size.

Derivations that loop back through a fact already being blocked higher
up the walk are skipped: under monotone progression a capability cannot
be the first step of its own derivation.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

from .attackgraph import Atom, FactBase, LogicalAttackGraph, derive


class MitigationError(Exception):
    pass


class TargetUnreachable(MitigationError):
    """The requested condition is not present in the attack graph."""


class Unblockable(MitigationError):
    """Some derivation of the target rests on no connectivity leaf."""


@dataclass(frozen=True, order=True)
class FirewallRule:
    src: str
    dst: str
    protocol: str = "any"  # tcp | udp | any
    port: str = "any"
    action: str = "deny"

    def text(self) -> str:
        return f"deny {self.protocol} {self.src} -> {self.dst}:{self.port}"

    def matches(self, hacl: Atom) -> bool:
        if hacl.predicate != "hacl":
            return False
        src, dst, prot, port = hacl.args
        return (
            self.src == src
            and self.dst == dst
            and self.protocol in ("any", prot)
            and self.port in ("any", port)
        )

    def to_json(self) -> dict:
        return {
            "src": self.src,
            "dst": self.dst,
            "protocol": self.protocol,
            "port": self.port,
            "action": self.action,
        }


def rule_for(hacl: Atom) -> FirewallRule:
    """The deny rule corresponding to one hacl connectivity atom."""
    if hacl.predicate != "hacl":
        raise ValueError(f"not a connectivity atom: {hacl}")
    src, dst, prot, port = hacl.args
    return FirewallRule(src=src, dst=dst, protocol=prot, port=port)


@dataclass(frozen=True)
class RuleLeaf:
    rule: FirewallRule


@dataclass(frozen=True)
class AllOf:
    children: tuple


@dataclass(frozen=True)
class AnyOf:
    children: tuple


@dataclass(frozen=True)
class RuleTree:
    target: Atom
    root: object  # RuleLeaf | AllOf | AnyOf

    def render(self) -> str:
        def walk(node, depth):
            pad = "  " * depth
            if isinstance(node, RuleLeaf):
                return f"{pad}{node.rule.text()}"
            tag = "ALL-of" if isinstance(node, AllOf) else "ANY-of"
            inner = "\n".join(walk(c, depth + 1) for c in node.children)
            return f"{pad}{tag}\n{inner}"

        return f"block {self.target}\n" + walk(self.root, 1)


def _connective(cls, children):
    if len(children) == 1:
        return children[0]
    return cls(tuple(children))


def build_rule_tree(lag: LogicalAttackGraph, target: Atom) -> RuleTree:
    """Connective tree of deny rules whose models all sever the target."""
    if not lag.reachable(target):
        raise TargetUnreachable(str(target))

    cache: dict[Atom, object] = {}
    UNBLOCKABLE = object()

    def block(node: Atom, path: frozenset):
        # returns (tree-or-UNBLOCKABLE, pure), pure = cacheable (no on-path
        # ancestor was consulted while computing it)
        if node in cache:
            return cache[node], True
        if node in lag.leaves:
            res = RuleLeaf(rule_for(node)) if node.predicate == "hacl" else UNBLOCKABLE
            cache[node] = res
            return res, True

        requirements = []
        pure = True
        subpath = path | {node}
        for inst in lag.derivations.get(node, ()):
            if any(b in subpath for b in inst.body):
                # cyclic derivation: cannot fire before the fact it loops
                # through is itself blocked, so no cut is needed for it
                pure = False
                continue
            options = []
            for pre in inst.body:
                sub, sub_pure = block(pre, subpath)
                pure = pure and sub_pure
                if sub is not UNBLOCKABLE:
                    options.append(sub)
            if not options:
                if pure:
                    cache[node] = UNBLOCKABLE
                return UNBLOCKABLE, pure
            requirements.append(_connective(AnyOf, options))
        res = _connective(AllOf, requirements)
        if pure:
            cache[node] = res
        return res, pure

    root, _ = block(target, frozenset())
    if root is UNBLOCKABLE:
        raise Unblockable(str(target))
    if isinstance(root, RuleLeaf):
        root = AnyOf((root,))
    return RuleTree(target, root)


def _minimal(models: list[frozenset]) -> list[frozenset]:
    out = []
    for m in sorted(set(models), key=lambda s: (len(s), sorted(r.text() for r in s))):
        if not any(kept < m for kept in out):
            out.append(m)
    return out


def _models(node) -> list[frozenset]:
    if isinstance(node, RuleLeaf):
        return [frozenset([node.rule])]
    if isinstance(node, AnyOf):
        return _minimal([m for c in node.children for m in _models(c)])
    combos = [frozenset()]
    for c in node.children:
        child = _models(c)
        combos = _minimal([a | b for a in combos for b in child])
    return combos


def enumerate_rule_sets(tree: RuleTree, limit: int = 16) -> list[frozenset[FirewallRule]]:
    """Minimal satisfying rule sets, smallest first, no supersets."""
    if limit < 1:
        raise ValueError("limit must be >= 1")
    return _models(tree.root)[:limit]


def verify_block(facts: FactBase, rules, ruleset, target: Atom) -> bool:
    """Ground truth check: drop the denied hacl facts, re-run inference."""
    ruleset = list(ruleset)
    dropped = {
        a
        for a in facts.with_predicate("hacl")
        if any(r.matches(a) for r in ruleset)
    }
    remaining = facts.without(dropped)
    return target not in derive(remaining, rules)


def ruleset_to_json(ruleset) -> list[dict]:
    return [r.to_json() for r in sorted(ruleset)]


def ruleset_to_text(ruleset) -> str:
    return "\n".join(r.text() for r in sorted(ruleset)) + "\n"
