"""Datalog-style fact base, monotone inference, and logical attack graphs.

Network facts (reachability, services, vulnerabilities) and a small set
of interaction rules are evaluated bottom-up to a least fixpoint under
the monotonicity assumption: capabilities, once gained, are never lost.
The evaluation also records every satisfied rule instance, which yields
the AND/OR proof structure of the logical attack graph (LAG):

    LEAF  an input fact
    AND   a grounded rule instance (all body atoms -> head)
    OR    a derived fact, true if any of its AND derivations fires

Goal nodes are the execCode atoms: attacker code execution on a host at
some privilege level.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

VARIABLE_PREFIX = "_"

# predicate -> arity, for every atom that may appear in a fact base
SCHEMA = {
    "attackerLocated": 1,
    "hacl": 4,
    "vulExists": 5,
    "networkServiceInfo": 5,
    "hasAccount": 3,
    "netAccess": 3,
    "execCode": 2,
}
INPUT_PREDICATES = ("attackerLocated", "hacl", "vulExists", "networkServiceInfo", "hasAccount")


def register_predicate(name: str, arity: int) -> None:
    """Extend the schema so custom rule sets can derive new predicates."""
    if SCHEMA.get(name, arity) != arity:
        raise SchemaViolation(f"{name} already registered with arity {SCHEMA[name]}")
    SCHEMA[name] = arity

SCAN_SCHEMA_VERSION = 1
TOPOLOGY_SCHEMA_VERSION = 1


class ReasonerError(Exception):
    pass


class SchemaViolation(ReasonerError):
    """A document or atom does not match its published schema."""


class UnknownPredicate(ReasonerError):
    pass


class UnsafeRule(ReasonerError):
    """A head variable does not occur in the rule body."""


@dataclass(frozen=True, order=True)
class Atom:
    predicate: str
    args: tuple[str, ...]

    def __str__(self):
        return f"{self.predicate}({','.join(self.args)})"

    @property
    def is_ground(self) -> bool:
        return not any(a.startswith(VARIABLE_PREFIX) for a in self.args)


def atom(predicate: str, *args) -> Atom:
    """Build an atom, normalizing every argument to a string."""
    return Atom(predicate, tuple(str(a) for a in args))


def parse_atom(text: str) -> Atom:
    text = text.strip()
    if not text.endswith(")") or "(" not in text:
        raise SchemaViolation(f"cannot parse atom {text!r}")
    pred, argstr = text[:-1].split("(", 1)
    args = tuple(a.strip() for a in argstr.split(",")) if argstr.strip() else ()
    return Atom(pred.strip(), args)


def check_atom(a: Atom) -> Atom:
    if a.predicate not in SCHEMA:
        raise UnknownPredicate(f"unknown predicate {a.predicate!r}")
    if len(a.args) != SCHEMA[a.predicate]:
        raise SchemaViolation(
            f"{a.predicate} expects {SCHEMA[a.predicate]} arguments, got {len(a.args)}"
        )
    return a


class FactBase:
    """An immutable set of ground, schema-checked atoms."""

    def __init__(self, atoms=()):
        checked = frozenset(check_atom(a) for a in atoms)
        for a in checked:
            if not a.is_ground:
                raise SchemaViolation(f"fact {a} is not ground")
        self._atoms = checked

    def __contains__(self, a):
        return a in self._atoms

    def __iter__(self):
        return iter(sorted(self._atoms))

    def __len__(self):
        return len(self._atoms)

    def __eq__(self, other):
        return isinstance(other, FactBase) and self._atoms == other._atoms

    def __hash__(self):
        return hash(self._atoms)

    def atoms(self) -> frozenset[Atom]:
        return self._atoms

    def with_predicate(self, predicate: str) -> list[Atom]:
        return sorted(a for a in self._atoms if a.predicate == predicate)

    def without(self, drop) -> "FactBase":
        drop = set(drop)
        return FactBase(a for a in self._atoms if a not in drop)


@dataclass(frozen=True)
class InteractionRule:
    head: Atom
    body: tuple[Atom, ...]
    label: str

    def __post_init__(self):
        body_vars = {a for at in self.body for a in at.args if a.startswith(VARIABLE_PREFIX)}
        head_vars = {a for a in self.head.args if a.startswith(VARIABLE_PREFIX)}
        if not head_vars <= body_vars:
            raise UnsafeRule(f"rule {self.label}: unbound head variables {head_vars - body_vars}")


DEFAULT_RULES = (
    InteractionRule(
        head=atom("execCode", "_h", "_perm"),
        body=(
            atom("netAccess", "_h", "_prot", "_port"),
            atom("networkServiceInfo", "_h", "_svc", "_prot", "_port", "_perm"),
            atom("vulExists", "_h", "_vul", "_svc", "remote", "privEscalation"),
        ),
        label="remote-exploit",
    ),
    InteractionRule(
        head=atom("netAccess", "_h", "_prot", "_port"),
        body=(
            atom("attackerLocated", "_z"),
            atom("hacl", "_z", "_h", "_prot", "_port"),
        ),
        label="direct-reach",
    ),
    InteractionRule(
        head=atom("netAccess", "_h", "_prot", "_port"),
        body=(
            atom("execCode", "_z", "_perm"),
            atom("hacl", "_z", "_h", "_prot", "_port"),
        ),
        label="pivot",
    ),
)


def rules_to_json(rules) -> list[dict]:
    return [
        {"label": r.label, "head": str(r.head), "body": [str(b) for b in r.body]}
        for r in rules
    ]


def rules_from_json(doc) -> tuple[InteractionRule, ...]:
    return tuple(
        InteractionRule(
            head=parse_atom(r["head"]),
            body=tuple(parse_atom(b) for b in r["body"]),
            label=r["label"],
        )
        for r in doc
    )


def _unify(template: Atom, ground: Atom, binding: dict) -> dict | None:
    if template.predicate != ground.predicate or len(template.args) != len(ground.args):
        return None
    out = binding
    for t, g in zip(template.args, ground.args):
        if t.startswith(VARIABLE_PREFIX):
            bound = out.get(t)
            if bound is None:
                if out is binding:
                    out = dict(binding)
                out[t] = g
            elif bound != g:
                return None
        elif t != g:
            return None
    return out if out is not binding else dict(binding)


def _subst(template: Atom, binding: dict) -> Atom:
    return Atom(
        template.predicate,
        tuple(binding.get(a, a) if a.startswith(VARIABLE_PREFIX) else a for a in template.args),
    )


def _match_rule(rule, index, delta):
    """Yield (head, body) groundings with at least one body atom in delta."""
    def walk(pos, binding, used_delta):
        if pos == len(rule.body):
            if used_delta:
                yield binding
            return
        template = rule.body[pos]
        remaining_can_hit_delta = any(
            b.predicate in delta_preds for b in rule.body[pos + 1 :]
        )
        for ground in index.get(template.predicate, ()):
            nb = _unify(template, ground, binding)
            if nb is None:
                continue
            hit = used_delta or ground in delta
            if not hit and not remaining_can_hit_delta:
                continue
            yield from walk(pos + 1, nb, hit)

    delta_preds = {a.predicate for a in delta}
    for binding in walk(0, {}, False):
        yield (
            _subst(rule.head, binding),
            tuple(_subst(b, binding) for b in rule.body),
        )


def _fixpoint(facts, rules):
    """Semi-naive least fixpoint; returns (derived set, rule instances)."""
    known = set(facts.atoms() if isinstance(facts, FactBase) else facts)
    index: dict[str, list[Atom]] = {}
    for a in sorted(known):
        index.setdefault(a.predicate, []).append(a)
    delta = set(known)
    instances = set()
    while delta:
        new = set()
        for rule in rules:
            for head, body in _match_rule(rule, index, delta):
                instances.add((rule.label, head, body))
                if head not in known and head not in new:
                    check_atom(head)
                    new.add(head)
        for a in sorted(new):
            index.setdefault(a.predicate, []).append(a)
        known |= new
        delta = new
    return known, instances


def derive(facts: FactBase, rules=DEFAULT_RULES) -> FactBase:
    """Least fixpoint of the rules over the facts (superset of the input)."""
    known, _ = _fixpoint(facts, rules)
    return FactBase(known)


@dataclass(frozen=True)
class AndNode:
    """One grounded rule instance: body atoms jointly derive the head."""

    label: str
    head: Atom
    body: tuple[Atom, ...]

    @property
    def node_id(self) -> str:
        return f"{self.label}:{self.head}<-" + "&".join(str(b) for b in self.body)


@dataclass
class LogicalAttackGraph:
    leaves: frozenset[Atom]
    or_nodes: frozenset[Atom]
    and_nodes: tuple[AndNode, ...]
    goals: frozenset[Atom]
    derivations: dict[Atom, tuple[AndNode, ...]] = field(default_factory=dict)

    def reachable(self, a: Atom) -> bool:
        """True iff the atom has a node (input fact or derived) in the graph."""
        return a in self.leaves or a in self.or_nodes

    def node_count(self) -> int:
        return len(self.leaves) + len(self.or_nodes) + len(self.and_nodes)

    def to_text(self) -> str:
        lines = [f"LEAF {a}" for a in sorted(self.leaves)]
        lines += [f"OR {a}" for a in sorted(self.or_nodes)]
        lines += [f"GOAL {a}" for a in sorted(self.goals)]
        for n in self.and_nodes:
            lines.append(f"AND {n.label} {n.head}")
            for b in n.body:
                lines.append(f"EDGE {b} -> {n.node_id}")
            lines.append(f"EDGE {n.node_id} -> {n.head}")
        return "\n".join(lines) + "\n"

    def to_dot(self) -> str:
        def q(s):
            return '"' + str(s).replace('"', r"\"") + '"'

        out = ["digraph lag {"]
        for a in sorted(self.leaves):
            out.append(f"  {q(a)} [shape=box];")
        for a in sorted(self.or_nodes):
            shape = "doublecircle" if a in self.goals else "ellipse"
            out.append(f"  {q(a)} [shape={shape}];")
        for i, n in enumerate(self.and_nodes):
            out.append(f"  and{i} [shape=point,label={q(n.label)}];")
            for b in n.body:
                out.append(f"  {q(b)} -> and{i};")
            out.append(f"  and{i} -> {q(n.head)};")
        out.append("}")
        return "\n".join(out) + "\n"


def build_lag(facts: FactBase, rules=DEFAULT_RULES) -> LogicalAttackGraph:
    """Run inference and keep the proof structure.

    OR nodes are exactly the derived (non-input) atoms; AND nodes are the
    satisfied rule instances whose head is derived. Instances deriving an
    input fact are dropped: that node is a LEAF and already true.
    """
    leaves = facts.atoms() if isinstance(facts, FactBase) else frozenset(facts)
    known, instances = _fixpoint(facts, rules)
    or_atoms = frozenset(known - set(leaves))
    ands = tuple(
        AndNode(label, head, body)
        for label, head, body in sorted(instances, key=lambda t: (str(t[1]), t[0], t[2]))
        if head in or_atoms
    )
    derivations: dict[Atom, list[AndNode]] = {}
    for n in ands:
        derivations.setdefault(n.head, []).append(n)
    goals = frozenset(a for a in known if a.predicate == "execCode")
    return LogicalAttackGraph(
        leaves=frozenset(leaves),
        or_nodes=or_atoms,
        and_nodes=ands,
        goals=goals,
        derivations={k: tuple(v) for k, v in derivations.items()},
    )


# --- document loading -----------------------------------------------------


def _need(doc, key, kind, where):
    if key not in doc:
        raise SchemaViolation(f"{where}: missing key {key!r}")
    if not isinstance(doc[key], kind):
        raise SchemaViolation(f"{where}: key {key!r} must be {kind.__name__}")
    return doc[key]


def _check_version(doc, expected, where):
    v = _need(doc, "version", int, where)
    if v != expected:
        raise SchemaViolation(f"{where}: unsupported version {v}")


def load_facts(scan_report: dict, topology: dict) -> FactBase:
    """Map a scan report and a topology document onto input atoms."""
    atoms: list[Atom] = []
    _check_version(scan_report, SCAN_SCHEMA_VERSION, "scan report")
    for i, f in enumerate(_need(scan_report, "findings", list, "scan report")):
        where = f"finding #{i}"
        if not isinstance(f, dict):
            raise SchemaViolation(f"{where}: must be an object")
        host = _need(f, "host", str, where)
        svc = _need(f, "service", str, where)
        prot = _need(f, "protocol", str, where)
        port = _need(f, "port", (int, str), where)
        priv = _need(f, "privilege", str, where)
        cve = _need(f, "cve", str, where)
        access = f.get("access", "remote")
        impact = f.get("impact", "privEscalation")
        atoms.append(atom("vulExists", host, cve, svc, access, impact))
        atoms.append(atom("networkServiceInfo", host, svc, prot, port, priv))

    _check_version(topology, TOPOLOGY_SCHEMA_VERSION, "topology")
    _need(topology, "hosts", list, "topology")
    for i, link in enumerate(_need(topology, "links", list, "topology")):
        where = f"link #{i}"
        if not isinstance(link, dict):
            raise SchemaViolation(f"{where}: must be an object")
        atoms.append(
            atom(
                "hacl",
                _need(link, "src", str, where),
                _need(link, "dst", str, where),
                _need(link, "protocol", str, where),
                _need(link, "port", (int, str), where),
            )
        )
    for z in topology.get("attacker", []):
        atoms.append(atom("attackerLocated", z))
    for i, acct in enumerate(topology.get("accounts", [])):
        where = f"account #{i}"
        atoms.append(
            atom(
                "hasAccount",
                _need(acct, "user", str, where),
                _need(acct, "host", str, where),
                _need(acct, "privilege", str, where),
            )
        )
    return FactBase(atoms)


def cve_scores(scan_report: dict) -> dict[str, float]:
    """CVE id -> base score (0..10) from a scan report document."""
    _check_version(scan_report, SCAN_SCHEMA_VERSION, "scan report")
    out = {}
    for f in _need(scan_report, "findings", list, "scan report"):
        if isinstance(f, dict) and "cve" in f:
            score = f.get("score", 5.0)
            if not isinstance(score, (int, float)) or not 0.0 <= float(score) <= 10.0:
                raise SchemaViolation(f"finding {f.get('cve')}: score must be in 0..10")
            out[str(f["cve"])] = float(score)
    return out
