"""amishield: a desk-scale AMI cyber-defense toolkit.

Traffic is rendered into space-filling-curve RGB images and classified
as normal or malware; detected intrusions drive attack-graph risk
analysis and POMCP-planned firewall mitigation over a simulated
metering network.
"""

__version__ = "0.1.0"

from .attackgraph import (
    Atom,
    FactBase,
    InteractionRule,
    LogicalAttackGraph,
    DEFAULT_RULES,
    atom,
    build_lag,
    derive,
    load_facts,
)
from .bayesgraph import BayesianAttackGraph, lag_to_bag, local_cpd, posterior, unconditional
from .bytevis import VisImage, classify_byte, curve_point, render
from .corpus import Corpus, synthetic_corpus
from .detector import Hyper, Metrics, Model, Verdict, classify, evaluate, featurize, train, update
from .mitigate import FirewallRule, RuleTree, build_rule_tree, enumerate_rule_sets, verify_block
from .pcapio import ByteSample, PacketRecord, extract_payloads, read_capture, write_capture
from .planner import (
    BeliefState,
    Costs,
    DefenderAction,
    DefenseModel,
    ObsParams,
    build_pomdp,
    goal_proximity_weight,
    initial_belief,
    plan,
    simulate_step,
    update_belief,
)
from .amisim import (
    AttackerProfile,
    EpisodeTrace,
    NoOpDefender,
    PomcpDefender,
    SimTopology,
    gen_topology,
    inject_traffic,
    run_episode,
)
