"""Discrete-event AMI simulator: meters, concentrators, and an MDM.

Time advances in duty cycles. Every meter reports one sub-1KB payload
per cycle to its concentrator; meters under attacker control send
malware payloads instead. Each cycle the detector classifies the
traffic, first-time alerts feed the defender's belief, the chosen rule
set (if any) cuts links, and the attacker fires whatever exploits
remain enabled. The attacker enters through the meters' home-network
side (the habitual malware ingress), then pivots meter -> concentrator
-> MDM; the default defense goal is keeping code execution off the MDM.

Topologies are generated point-to-multipoint (meters speak only to
their concentrator) or mesh (adjacent meters relay for each other) and
can be exported as fact documents, scan reports, or pcap captures.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, asdict

from scipy.stats import binomtest

from . import bytevis, detector, pcapio
from .attackgraph import Atom, FactBase, atom, build_lag, DEFAULT_RULES
from .bayesgraph import lag_to_bag
from .corpus import Corpus, synthetic_corpus
from .mitigate import Unblockable, build_rule_tree, enumerate_rule_sets
from .planner import (
    NO_OP,
    BeliefState,
    Costs,
    DefenderAction,
    DefenseModel,
    ObsParams,
    build_pomdp,
    initial_belief,
    plan,
    simulate_step,
    update_belief,
)

DUTY_CYCLE_S = 900  # 15-minute reporting interval by default
MAX_READING_BYTES = 1024

MODE_P2MP = "point-to-multipoint"
MODE_MESH = "mesh"


class SimError(Exception):
    pass


class InvalidCounts(SimError):
    pass


class OversizedPayload(SimError):
    """A normal corpus entry does not fit in a duty-cycle reading."""


@dataclass(frozen=True)
class VulnSpec:
    cve: str
    service: str
    protocol: str
    port: int
    privilege: str = "root"
    access: str = "remote"
    impact: str = "privEscalation"
    score: float = 7.0


@dataclass(frozen=True)
class Link:
    src: str
    dst: str
    protocol: str
    port: int
    layer: str  # HAN | NAN | WAN


@dataclass
class SimTopology:
    hosts: dict[str, str]  # name -> meter | concentrator | mdm
    links: tuple[Link, ...]
    mode: str
    vulnerable: dict[str, tuple[VulnSpec, ...]]
    upstream: dict[str, str]  # duty-cycle report destination
    attacker_zone: str = "internet"

    def ip_of(self, host: str) -> str:
        names = sorted(self.hosts)
        octet = names.index(host)
        return f"10.0.{octet // 250}.{octet % 250 + 1}"

    def host_of_ip(self, ip: str) -> str | None:
        for h in sorted(self.hosts):
            if self.ip_of(h) == ip:
                return h
        return None

    def service_port(self, host: str) -> tuple[str, int]:
        kind = self.hosts[host]
        return {"meter": ("udp", 5684), "concentrator": ("udp", 5685), "mdm": ("tcp", 8443)}[kind]

    def to_facts(self, include_attacker: bool = True) -> FactBase:
        atoms = []
        if include_attacker:
            atoms.append(atom("attackerLocated", self.attacker_zone))
        for link in self.links:
            atoms.append(atom("hacl", link.src, link.dst, link.protocol, link.port))
        for host, vulns in self.vulnerable.items():
            for v in vulns:
                atoms.append(atom("vulExists", host, v.cve, v.service, v.access, v.impact))
                atoms.append(
                    atom("networkServiceInfo", host, v.service, v.protocol, v.port, v.privilege)
                )
        return FactBase(atoms)

    def cve_scores(self) -> dict[str, float]:
        return {v.cve: v.score for vulns in self.vulnerable.values() for v in vulns}

    def to_topology_doc(self) -> dict:
        return {
            "version": 1,
            "hosts": sorted(self.hosts),
            "links": [
                {"src": l.src, "dst": l.dst, "protocol": l.protocol, "port": l.port}
                for l in self.links
            ],
            "attacker": [self.attacker_zone],
            "accounts": [],
        }

    def to_scan_report(self) -> dict:
        findings = []
        for host in sorted(self.vulnerable):
            for v in self.vulnerable[host]:
                findings.append(
                    {
                        "host": host,
                        "service": v.service,
                        "protocol": v.protocol,
                        "port": v.port,
                        "privilege": v.privilege,
                        "cve": v.cve,
                        "access": v.access,
                        "impact": v.impact,
                        "score": v.score,
                    }
                )
        return {"version": 1, "findings": findings}


def gen_topology(
    n_meters: int,
    n_concentrators: int,
    mode: str = MODE_P2MP,
    vuln_density: float = 1.0,
    seed: int = 0,
) -> SimTopology:
    """Deterministic random AMI topology.

    Every meter is homed on one concentrator (mesh additionally links
    neighbouring meters) and every concentrator links to the MDM. The
    attacker zone reaches the meters through their home-network side;
    subsequent hops pivot over the NAN and WAN links. vuln_density is
    the probability that a meter carries an exploitable service;
    concentrators and the MDM always do, so a goal exists.
    """
    if n_meters < 1 or n_concentrators < 1:
        raise InvalidCounts("need at least one meter and one concentrator")
    if mode not in (MODE_P2MP, MODE_MESH):
        raise ValueError(f"unknown topology mode {mode!r}")
    rng = random.Random(seed)

    meters = [f"meter{i + 1}" for i in range(n_meters)]
    concs = [f"conc{i + 1}" for i in range(n_concentrators)]
    hosts = {m: "meter" for m in meters}
    hosts.update({c: "concentrator" for c in concs})
    hosts["mdm"] = "mdm"

    home = {m: concs[i % n_concentrators] for i, m in enumerate(meters)}
    links = []
    for m in meters:
        links.append(Link("internet", m, "udp", 5684, "HAN"))
        links.append(Link(m, home[m], "udp", 5685, "NAN"))
        links.append(Link(home[m], m, "udp", 5684, "NAN"))
    if mode == MODE_MESH:
        for i in range(n_meters - 1):
            a, b = meters[i], meters[i + 1]
            links.append(Link(a, b, "udp", 5684, "NAN"))
            links.append(Link(b, a, "udp", 5684, "NAN"))
    for c in concs:
        links.append(Link(c, "mdm", "tcp", 8443, "WAN"))
        links.append(Link("mdm", c, "udp", 5685, "WAN"))

    vulnerable = {}
    counter = 0
    for host in meters + concs + ["mdm"]:
        always = hosts[host] != "meter"
        if always or rng.random() < vuln_density:
            counter += 1
            prot, port = {"meter": ("udp", 5684), "concentrator": ("udp", 5685), "mdm": ("tcp", 8443)}[hosts[host]]
            vulnerable[host] = (
                VulnSpec(
                    cve=f"CVE-SIM-{counter:04d}",
                    service=f"{hosts[host]}d",
                    protocol=prot,
                    port=port,
                    score=round(rng.uniform(6.0, 9.5), 1),
                ),
            )

    topo = SimTopology(
        hosts=hosts,
        links=tuple(links),
        mode=mode,
        vulnerable=vulnerable,
        upstream={**home, **{c: "mdm" for c in concs}},
    )
    return topo


@dataclass
class TrafficBatch:
    records: tuple[pcapio.PacketRecord, ...]
    sources: tuple[str, ...]  # emitting host per record
    labels: tuple[str, ...]  # ground truth per record


def inject_traffic(
    topology: SimTopology,
    corpus: Corpus,
    duty_cycle_s: int = DUTY_CYCLE_S,
    steps: int = 1,
    seed: int = 0,
    compromised=frozenset(),
    start_step: int = 0,
) -> TrafficBatch:
    """Duty-cycle reporting traffic: one payload per meter per step."""
    if not corpus.normal or not corpus.malware:
        raise ValueError("corpus must hold both normal and malware payloads")
    for p in corpus.normal:
        if len(p) >= MAX_READING_BYTES:
            raise OversizedPayload(f"normal payload of {len(p)} bytes exceeds a reading")
    rng = random.Random(seed)
    senders = sorted(h for h in topology.hosts if topology.hosts[h] == "meter")
    records, sources, labels = [], [], []
    for step in range(start_step, start_step + steps):
        for i, host in enumerate(senders):
            bad = host in compromised
            pool = corpus.malware if bad else corpus.normal
            payload = pool[int(rng.random() * len(pool))]
            dst = topology.upstream[host]
            _, dport = topology.service_port(dst)
            frame = pcapio.build_udp_frame(
                topology.ip_of(host), topology.ip_of(dst), 40000 + i, dport, payload
            )
            records.append(pcapio.PacketRecord(step * duty_cycle_s + i, 0, frame))
            sources.append(host)
            labels.append(detector.MALWARE if bad else detector.NORMAL)
    return TrafficBatch(tuple(records), tuple(sources), tuple(labels))


@dataclass(frozen=True)
class AttackerProfile:
    present: bool = True
    entry_zone: str = "internet"
    mode: str = "all"  # every enabled exploit per step, or "one"


ATTACKER_NONE = AttackerProfile(present=False)


class NoOpDefender:
    name = "no-op"

    def start(self, model, seed):
        pass

    def decide(self, observation) -> DefenderAction:
        return NO_OP

    def belief_summary(self) -> dict:
        return {}


class PomcpDefender:
    """Tracks a particle belief and plans each step with POMCP."""

    name = "pomcp"

    def __init__(self, budget: int = 256, seed: int = 0):
        self.budget = budget
        self.seed = seed

    def start(self, model, seed):
        self.model = model
        self.belief = initial_belief(model)
        self.rng = random.Random(seed * 1000003 + 2)
        self.last_action = NO_OP
        self.step = 0

    def decide(self, observation) -> DefenderAction:
        self.belief = update_belief(
            self.belief, self.last_action, observation, self.model, self.rng
        )
        self.step += 1
        action = plan(self.model, self.belief, self.budget, seed=self.seed + self.step)
        self.last_action = action
        return action

    def belief_summary(self) -> dict:
        """Per-goal occupancy plus mean compromised-condition count."""
        particles = self.belief.particles
        mean_bits = sum(p.bit_count() for p in particles) / len(particles)
        out = {"mean_true_conditions": round(mean_bits, 3)}
        for goal in self.model.conditions:
            bit = 1 << self.model.index[goal]
            if bit & self.model.goal_mask:
                out[goal] = round(self.belief.occupancy(bit), 4)
        if self.belief.reinitialized:
            out["reinitialized"] = True
        return out


@dataclass
class DefenseBundle:
    """Everything an episode needs that does not depend on the seed."""

    model: DefenseModel
    facts: FactBase
    goal_atoms: tuple[Atom, ...]
    corpus: Corpus
    detector_model: detector.Model
    exec_mask_of_host: dict[str, int]
    attacker_bit: int


def prepare_defense(
    topology: SimTopology,
    goals=None,
    corpus: Corpus | None = None,
    detector_model: detector.Model | None = None,
    costs: Costs | None = None,
    obs: ObsParams | None = None,
    rule_limit: int = 6,
    attack_mode: str = "all",
    particle_count: int = 400,
    rollout_depth: int = 12,
) -> DefenseBundle:
    """Build the LAG, BAG, mitigation candidates, and POMDP for a topology.

    The defended goals default to code execution on the MDM; meter
    compromise is treated as a stepping stone, not a loss.
    """
    facts = topology.to_facts()
    lag = build_lag(facts, DEFAULT_RULES)
    bag = lag_to_bag(lag, topology.cve_scores())
    if goals is None:
        goals = sorted(g for g in lag.goals if g.args[0] == "mdm") or sorted(lag.goals)
    goal_atoms = tuple(goals)

    candidates = []
    for goal in goal_atoms:
        try:
            tree = build_rule_tree(lag, goal)
        except Unblockable:
            continue
        candidates.extend(enumerate_rule_sets(tree, limit=rule_limit))
    model = build_pomdp(
        bag,
        candidates,
        costs=costs,
        obs=obs,
        goals=goal_atoms,
        attack_mode=attack_mode,
        particle_count=particle_count,
        rollout_depth=rollout_depth,
    )

    if corpus is None:
        corpus = synthetic_corpus(48, 48, seed=7)
    if detector_model is None:
        X, y = _corpus_features(corpus)
        detector_model = detector.train(X, y, detector.Hyper(kind="mlp", epochs=20, seed=7))

    exec_mask = {}
    for cond in model.conditions:
        if cond.startswith("execCode("):
            host = cond[len("execCode(") : -1].split(",")[0]
            exec_mask[host] = exec_mask.get(host, 0) | model.bit(cond)
    attacker_bit = 0
    located = str(atom("attackerLocated", topology.attacker_zone))
    if located in model.index:
        attacker_bit = model.bit(located)

    return DefenseBundle(
        model, facts, goal_atoms, corpus, detector_model, exec_mask, attacker_bit
    )


def _corpus_features(corpus: Corpus):
    import numpy as np

    from .corpus import features_for_payloads

    X = features_for_payloads(corpus.normal + corpus.malware)
    y = np.concatenate([np.zeros(len(corpus.normal)), np.ones(len(corpus.malware))])
    return X, y


@dataclass(frozen=True)
class StepRecord:
    t: int
    time_s: int
    attacker_moves: tuple[str, ...]
    alerts: tuple[str, ...]  # hosts newly flagged by the detector
    belief: dict
    action: str
    reward: float


@dataclass
class EpisodeTrace:
    steps: list[StepRecord]
    outcome: str  # goal-reached | contained | timeout
    total_reward: float

    def to_jsonl(self) -> str:
        lines = [json.dumps(asdict(s)) for s in self.steps]
        lines.append(json.dumps({"outcome": self.outcome, "total_reward": self.total_reward}))
        return "\n".join(lines) + "\n"


def _eventually_reachable(model: DefenseModel, true: int, blocked: int) -> bool:
    """Can any goal still be compromised through unblocked derivations?"""
    cur = true
    while True:
        nxt = cur
        for bit, groups in model.derived_groups:
            if cur & bit:
                continue
            for pmask, prob in groups:
                if prob > 0.0 and not (pmask & ~cur) and not (pmask & blocked):
                    nxt |= bit
                    break
        if nxt == cur:
            return bool(cur & model.goal_mask)
        if nxt & model.goal_mask:
            return True
        cur = nxt


def run_episode(
    topology: SimTopology,
    attacker_profile: AttackerProfile,
    defender,
    horizon: int = 12,
    seed: int = 0,
    bundle: DefenseBundle | None = None,
    duty_cycle_s: int = DUTY_CYCLE_S,
) -> EpisodeTrace:
    """Closed loop: traffic -> detector -> belief -> planner -> mitigation.

    The trace records, per duty cycle, the attacker's new conditions, the
    hosts newly flagged by the detector, the defender's action, and the
    environment reward (the same reward function the planner optimizes).
    """
    bundle = bundle or prepare_defense(topology, attack_mode=attacker_profile.mode)
    model = bundle.model
    env_rng = random.Random(seed * 1000003)
    det_threshold = bundle.detector_model.hyper.threshold

    exclude = 0 if attacker_profile.present else bundle.attacker_bit
    true = model.initial_true_mask(exclude_mask=exclude)
    blocked = 0
    defender.start(model, seed)

    alerted: set[str] = set()
    steps: list[StepRecord] = []
    total_reward = 0.0
    outcome = "timeout"

    for t in range(1, horizon + 1):
        compromised = {h for h, m in bundle.exec_mask_of_host.items() if true & m}
        batch = inject_traffic(
            topology,
            bundle.corpus,
            duty_cycle_s,
            steps=1,
            seed=seed * 1000003 + t,
            compromised=compromised,
            start_step=t - 1,
        )
        new_alerts = []
        for rec, host in zip(batch.records, batch.sources):
            sample = pcapio.extract_payloads([rec])[0]
            image = bytevis.render(sample)[0]
            verdict = detector.classify(bundle.detector_model, image)
            if verdict.label == detector.MALWARE and host not in alerted:
                alerted.add(host)
                new_alerts.append(host)
        obs = 0
        for host in new_alerts:
            obs |= bundle.exec_mask_of_host.get(host, 0)

        action = defender.decide(obs)
        (next_true, blocked), _, reward = simulate_step(
            model, (true, blocked), action, env_rng
        )
        moves = tuple(
            model.conditions[i]
            for i in range(model.n)
            if (next_true & ~true) >> i & 1
        )
        steps.append(
            StepRecord(
                t=t,
                time_s=t * duty_cycle_s,
                attacker_moves=moves,
                alerts=tuple(new_alerts),
                belief=defender.belief_summary(),
                action=action.describe(),
                reward=reward,
            )
        )
        total_reward += reward
        true = next_true
        if true & model.goal_mask:
            outcome = "goal-reached"
            break

    if outcome != "goal-reached":
        outcome = "timeout" if _eventually_reachable(model, true, blocked) else "contained"
    return EpisodeTrace(steps, outcome, total_reward)


def paired_defense_experiment(
    topology: SimTopology,
    episodes: int = 100,
    horizon: int = 12,
    seed: int = 0,
    budget: int = 256,
    bundle: DefenseBundle | None = None,
) -> dict:
    """POMCP vs. no-op over paired seeds, with a one-sided binomial test.

    The test asks whether, among discordant pairs, the no-op defender
    loses more often than the planner (exact binomial on the discordant
    count, alternative: greater).
    """
    bundle = bundle or prepare_defense(topology)
    pomcp_lost, noop_lost = [], []
    for ep in range(episodes):
        ep_seed = seed + ep
        pomcp = run_episode(
            topology, AttackerProfile(), PomcpDefender(budget=budget, seed=ep_seed),
            horizon, ep_seed, bundle,
        )
        noop = run_episode(
            topology, AttackerProfile(), NoOpDefender(), horizon, ep_seed, bundle
        )
        pomcp_lost.append(pomcp.outcome == "goal-reached")
        noop_lost.append(noop.outcome == "goal-reached")

    helped = sum(1 for p, n in zip(pomcp_lost, noop_lost) if n and not p)
    hurt = sum(1 for p, n in zip(pomcp_lost, noop_lost) if p and not n)
    discordant = helped + hurt
    p_value = (
        binomtest(helped, discordant, 0.5, alternative="greater").pvalue
        if discordant
        else 1.0
    )
    return {
        "episodes": episodes,
        "pomcp_goal_rate": sum(pomcp_lost) / episodes,
        "noop_goal_rate": sum(noop_lost) / episodes,
        "pairs_pomcp_better": helped,
        "pairs_pomcp_worse": hurt,
        "p_value": float(p_value),
    }
