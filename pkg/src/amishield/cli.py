"""Command-line pipeline driver.

One binary, subcommands for each stage: render pcaps to images, train
and run the detector, build attack graphs and their Bayesian overlay,
synthesize blocking rule sets, and run closed-loop simulations.
All outputs are machine-readable JSON (reports echo the effective
configuration); diagnostics go to stderr.

Exit codes: 0 ok, 1 bad capture magic, 2 I/O failure, 3 degenerate
dataset, 4 schema violation, 5 target unreachable or unblockable,
6 invalid simulation counts.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, amisim, bytevis, detector, pcapio
from .attackgraph import (
    DEFAULT_RULES,
    SchemaViolation,
    UnknownPredicate,
    build_lag,
    cve_scores,
    load_facts,
    parse_atom,
)
from .bayesgraph import lag_to_bag, unconditional
from .mitigate import (
    TargetUnreachable,
    Unblockable,
    build_rule_tree,
    enumerate_rule_sets,
    ruleset_to_json,
    ruleset_to_text,
)

EXIT_OK = 0
EXIT_BAD_MAGIC = 1
EXIT_IO = 2
EXIT_DEGENERATE = 3
EXIT_SCHEMA = 4
EXIT_UNREACHABLE = 5
EXIT_COUNTS = 6

MANIFEST_VERSION = 1


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _merged(args: argparse.Namespace, defaults: dict) -> dict:
    """Effective configuration: config-file values, overridden by flags."""
    config = {}
    if getattr(args, "config", None):
        config = _load_json(args.config)
        if not isinstance(config, dict):
            raise SchemaViolation("config file must hold a JSON object")
        unknown = set(config) - set(defaults)
        if unknown:
            raise SchemaViolation(f"config file has unknown keys: {sorted(unknown)}")
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in config:
            out[key] = config[key]
        else:
            out[key] = default
    return out


def cmd_render(args) -> int:
    cfg = _merged(args, {"order": 5, "curve": "hilbert", "label": None, "seed": 0})
    outdir = Path(args.out)
    try:
        records = pcapio.read_capture(args.infile)
    except pcapio.BadMagic as exc:
        return _fail(EXIT_BAD_MAGIC, str(exc))
    except (pcapio.PcapError, OSError) as exc:
        return _fail(EXIT_IO, str(exc))

    outdir.mkdir(parents=True, exist_ok=True)
    samples = pcapio.extract_payloads(records, policy="per-packet")
    entries = []
    counter = 0
    for sample in samples:
        for image in bytevis.render(sample, order=cfg["order"], curve=cfg["curve"]):
            name = f"img_{counter:05d}.png"
            try:
                bytevis.to_png(image, outdir / name)
            except OSError as exc:
                return _fail(EXIT_IO, str(exc))
            entry = {
                "path": name,
                "source": sample.source_id,
                "protocol": sample.protocol,
                "order": cfg["order"],
                "curve": cfg["curve"],
                "source_length": image.source_length,
            }
            if cfg["label"]:
                entry["label"] = cfg["label"]
            entries.append(entry)
            counter += 1
    manifest = {"version": MANIFEST_VERSION, "config": cfg, "images": entries}
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(json.dumps({"images": counter, "manifest": str(outdir / "manifest.json")}))
    return EXIT_OK


def _load_manifests(paths):
    X, y, names = [], [], []
    for path in paths:
        doc = _load_json(path)
        if not isinstance(doc, dict) or doc.get("version") != MANIFEST_VERSION:
            raise SchemaViolation(f"{path}: not a version-{MANIFEST_VERSION} manifest")
        base = Path(path).parent
        for entry in doc.get("images", []):
            img = bytevis.from_png(base / entry["path"])
            X.append(detector.featurize(img))
            y.append(1.0 if entry.get("label") == detector.MALWARE else 0.0)
            names.append(entry["path"])
    return np.array(X), np.array(y), names


def cmd_train(args) -> int:
    cfg = _merged(
        args,
        {"kind": "mlp", "epochs": 40, "hidden": 32, "lr": 0.3, "k": 3, "seed": 0},
    )
    try:
        X, y, _ = _load_manifests(args.manifest)
        hyper = detector.Hyper(
            kind=cfg["kind"],
            epochs=cfg["epochs"],
            hidden=cfg["hidden"],
            lr=cfg["lr"],
            k=cfg["k"],
            seed=cfg["seed"],
        )
        model = detector.train(X, y, hyper)
    except detector.DegenerateDataset as exc:
        return _fail(EXIT_DEGENERATE, str(exc))
    except SchemaViolation as exc:
        return _fail(EXIT_SCHEMA, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, str(exc))
    detector.save_model(model, args.model)
    metrics = detector.evaluate(model, X, y)
    print(
        json.dumps(
            {
                "config": cfg,
                "model": args.model,
                "train_accuracy": metrics.accuracy,
                "train_fpr": metrics.false_positive_rate,
                "train_fnr": metrics.false_negative_rate,
                "samples": metrics.n,
            }
        )
    )
    return EXIT_OK


def cmd_classify(args) -> int:
    try:
        model = detector.load_model(args.model)
        X, _, names = _load_manifests(args.manifest)
    except SchemaViolation as exc:
        return _fail(EXIT_SCHEMA, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, str(exc))
    scores = detector.predict_scores(model, X)
    out = sys.stdout if not args.out else open(args.out, "w")
    try:
        for name, score in zip(names, scores):
            label = detector.MALWARE if score >= model.hyper.threshold else detector.NORMAL
            out.write(json.dumps({"image": name, "label": label, "score": float(score)}) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        model = detector.load_model(args.model)
        X, y, _ = _load_manifests(args.manifest)
        metrics = detector.evaluate(model, X, y)
    except detector.EmptyDataset as exc:
        return _fail(EXIT_DEGENERATE, str(exc))
    except SchemaViolation as exc:
        return _fail(EXIT_SCHEMA, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, str(exc))
    print(
        json.dumps(
            {
                "accuracy": metrics.accuracy,
                "false_positive_rate": metrics.false_positive_rate,
                "false_negative_rate": metrics.false_negative_rate,
                "samples": metrics.n,
            }
        )
    )
    return EXIT_OK


def _facts_from_args(args):
    scan = _load_json(args.scan)
    topo = _load_json(args.topology)
    return load_facts(scan, topo), cve_scores(scan)


def cmd_attack_graph(args) -> int:
    try:
        facts, _ = _facts_from_args(args)
    except (SchemaViolation, UnknownPredicate) as exc:
        return _fail(EXIT_SCHEMA, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, str(exc))
    lag = build_lag(facts, DEFAULT_RULES)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "lag.txt").write_text(lag.to_text())
    (outdir / "lag.dot").write_text(lag.to_dot())
    print(
        json.dumps(
            {
                "leaves": len(lag.leaves),
                "derived": len(lag.or_nodes),
                "rule_instances": len(lag.and_nodes),
                "goals": sorted(str(g) for g in lag.goals),
            }
        )
    )
    return EXIT_OK


def cmd_bag(args) -> int:
    cfg = _merged(args, {"seed": 0, "samples": 100000})
    try:
        facts, scores = _facts_from_args(args)
    except (SchemaViolation, UnknownPredicate) as exc:
        return _fail(EXIT_SCHEMA, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, str(exc))
    lag = build_lag(facts, DEFAULT_RULES)
    bag = lag_to_bag(lag, scores)
    method = "exact" if len(bag) <= 20 else "mc"
    probs = unconditional(bag, method=method, samples=cfg["samples"], seed=cfg["seed"])
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    doc = bag.to_json()
    doc["unconditional"] = probs
    doc["method"] = method
    (outdir / "bag.json").write_text(json.dumps(doc, indent=2) + "\n")
    (outdir / "bag.dot").write_text(bag.to_dot())
    goal_probs = {g: probs[g] for g in bag.goals}
    print(json.dumps({"nodes": len(bag), "method": method, "goals": goal_probs, "config": cfg}))
    return EXIT_OK


def cmd_mitigate(args) -> int:
    cfg = _merged(args, {"limit": 16, "seed": 0})
    try:
        facts, _ = _facts_from_args(args)
        target = parse_atom(args.target)
    except (SchemaViolation, UnknownPredicate) as exc:
        return _fail(EXIT_SCHEMA, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, str(exc))
    lag = build_lag(facts, DEFAULT_RULES)
    try:
        tree = build_rule_tree(lag, target)
    except (TargetUnreachable, Unblockable) as exc:
        return _fail(EXIT_UNREACHABLE, f"{type(exc).__name__}: {exc}")
    rulesets = enumerate_rule_sets(tree, limit=cfg["limit"])
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "rulesets.json").write_text(
        json.dumps(
            {
                "target": str(target),
                "config": cfg,
                "rulesets": [ruleset_to_json(rs) for rs in rulesets],
            },
            indent=2,
        )
        + "\n"
    )
    (outdir / "rules.txt").write_text(ruleset_to_text(rulesets[0]))
    print(json.dumps({"target": str(target), "rulesets": len(rulesets)}))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _merged(
        args,
        {
            "meters": 3,
            "concentrators": 1,
            "mode": amisim.MODE_P2MP,
            "vuln_density": 1.0,
            "episodes": 1,
            "paired": False,
            "horizon": 12,
            "budget": 256,
            "particles": 400,
            "seed": 0,
            "defender": "pomcp",
            "attacker": "default",
        },
    )
    try:
        if cfg["meters"] < 1 or cfg["concentrators"] < 1:
            raise amisim.InvalidCounts("meters and concentrators must be >= 1")
        topology = amisim.gen_topology(
            cfg["meters"],
            cfg["concentrators"],
            cfg["mode"],
            cfg["vuln_density"],
            cfg["seed"],
        )
    except amisim.InvalidCounts as exc:
        return _fail(EXIT_COUNTS, str(exc))

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    bundle = amisim.prepare_defense(topology, particle_count=cfg["particles"])

    if cfg["paired"]:
        summary = amisim.paired_defense_experiment(
            topology,
            episodes=cfg["episodes"],
            horizon=cfg["horizon"],
            seed=cfg["seed"],
            budget=cfg["budget"],
            bundle=bundle,
        )
        summary["config"] = cfg
        (outdir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        print(json.dumps(summary))
        return EXIT_OK

    profile = (
        amisim.ATTACKER_NONE if cfg["attacker"] == "none" else amisim.AttackerProfile()
    )
    defender = (
        amisim.NoOpDefender()
        if cfg["defender"] == "no-op"
        else amisim.PomcpDefender(budget=cfg["budget"], seed=cfg["seed"])
    )
    goal_rate = 0
    rewards = []
    alert_total = 0
    for ep in range(cfg["episodes"]):
        trace = amisim.run_episode(
            topology, profile, defender, cfg["horizon"], cfg["seed"] + ep, bundle
        )
        (outdir / f"trace_{ep:03d}.jsonl").write_text(trace.to_jsonl())
        goal_rate += trace.outcome == "goal-reached"
        rewards.append(trace.total_reward)
        alert_total += sum(len(s.alerts) for s in trace.steps)
    summary = {
        "config": cfg,
        "episodes": cfg["episodes"],
        "goal_reached_rate": goal_rate / cfg["episodes"],
        "mean_reward": sum(rewards) / len(rewards),
        "alerts": alert_total,
    }
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amishield",
        description="AMI cyber-defense toolkit: visualize, detect, model, and respond.",
    )
    parser.add_argument("--version", action="version", version=f"amishield {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file; flags win on conflict")
        p.add_argument("--seed", type=int)
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("render", help="pcap payloads to PNG images + manifest")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--order", type=int)
    p.add_argument("--curve", choices=bytevis.CURVES)
    p.add_argument("--label", choices=[detector.NORMAL, detector.MALWARE])
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="fit a detector from image manifests")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--model", required=True, help="output model JSON path")
    p.add_argument("--kind", choices=["mlp", "knn"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--k", type=int)
    common(p, out_required=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", help="verdict JSON lines for a manifest")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="verdict file (default stdout)")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="accuracy/FPR/FNR on a labeled manifest")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attack-graph", help="logical attack graph from scan + topology")
    p.add_argument("--scan", required=True)
    p.add_argument("--topology", required=True)
    common(p)
    p.set_defaults(func=cmd_attack_graph)

    p = sub.add_parser("bag", help="Bayesian overlay + compromise probabilities")
    p.add_argument("--scan", required=True)
    p.add_argument("--topology", required=True)
    p.add_argument("--samples", type=int)
    common(p)
    p.set_defaults(func=cmd_bag)

    p = sub.add_parser("mitigate", help="blocking rule sets for a target condition")
    p.add_argument("--scan", required=True)
    p.add_argument("--topology", required=True)
    p.add_argument("--target", required=True, help='e.g. "execCode(mdm,root)"')
    p.add_argument("--limit", type=int)
    common(p)
    p.set_defaults(func=cmd_mitigate)

    p = sub.add_parser("simulate", help="closed-loop episodes on a generated topology")
    p.add_argument("--meters", type=int)
    p.add_argument("--concentrators", type=int)
    p.add_argument("--mode", choices=[amisim.MODE_P2MP, amisim.MODE_MESH])
    p.add_argument("--vuln-density", dest="vuln_density", type=float)
    p.add_argument("--episodes", type=int)
    p.add_argument("--paired", action="store_const", const=True)
    p.add_argument("--horizon", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--particles", type=int)
    p.add_argument("--defender", choices=["pomcp", "no-op"])
    p.add_argument("--attacker", choices=["default", "none"])
    common(p)
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SchemaViolation as exc:
        return _fail(EXIT_SCHEMA, str(exc))
    except pcapio.IoFailure as exc:
        return _fail(EXIT_IO, str(exc))


if __name__ == "__main__":
    sys.exit(main())
