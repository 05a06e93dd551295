"""Command-line entry point.

Subcommands: make-synthetic, sample-dataset, inspect-graph, train-kge,
train-agent, evaluate, analyze.  Every training command writes a run
directory holding the config snapshot, seed, checkpoints, JSON-lines logs and
a metrics file; ``evaluate`` rebuilds everything from that directory.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from dackgr.config import ALPHA_GRID, ANTICIPATION_STRATEGIES, BASELINES, MAX_ACTIONS_GRID, TOP_K_GRID, TrainConfig, merge
from dackgr.evaluator import dc_hits_analysis, evaluate, write_csv, write_metrics, write_paths, write_ranks
from dackgr.kg import GraphParseError, load_dataset_dir, read_triples
from dackgr.kge import KINDS, KGEConfig, ScoreModel, evaluate_kge, train_kge
from dackgr.policy import PolicyNetwork
from dackgr.sampler import SamplingError, resplit, retain_fraction, sample_by_entities, write_dataset
from dackgr.synthetic import SyntheticSpec, write_compositional
from dackgr.trainer import TrainingDivergedError, build_agent, read_reports, train, write_reports

logger = logging.getLogger("dackgr")


class CLIError(Exception):
    pass


def _read_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CLIError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CLIError(f"{p}: invalid JSON ({e})") from e


def _load_kg(data):
    if not Path(data).is_dir():
        raise CLIError(f"dataset directory not found: {data}")
    return load_dataset_dir(data)


def _prepare_run_dir(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- make-synthetic / sample-dataset / inspect-graph -----------------------------------

def cmd_make_synthetic(args) -> int:
    spec = SyntheticSpec(n_heads=args.heads, n_mids=args.mids, n_groups=args.groups, n_noise=args.noise,
                         held_out=args.held_out, sparsify=args.sparsify, seed=args.seed)
    write_compositional(args.out, spec)
    kg = load_dataset_dir(args.out)
    (Path(args.out) / "sparsity.json").write_text(kg.sparsity_report().to_json())
    print(f"wrote {len(kg.train)}/{len(kg.valid)}/{len(kg.test)} triples to {args.out}")
    return 0


def cmd_sample_dataset(args) -> int:
    triples = []
    for path in args.input:
        if not Path(path).exists():
            raise CLIError(f"input file not found: {path}")
        triples += read_triples(path)
    if args.mode == "retain":
        sampled = retain_fraction(triples, args.fraction, seed=args.seed)
    else:
        if args.seed_entities:
            seeds = [s for s in Path(args.seed_entities).read_text().split("\n") if s.strip()]
        else:
            ents = sorted({h for h, _, _ in triples} | {t for _, _, t in triples})
            n = max(1, int(round(args.seed_fraction * len(ents))))
            rng = np.random.default_rng(args.seed)
            seeds = [ents[i] for i in np.sort(rng.choice(len(ents), size=n, replace=False))]
        sampled = sample_by_entities(triples, seeds, rounds=args.rounds, seed=args.seed,
                                     neighbor_fraction=args.neighbor_fraction)
    train_, valid, test = resplit(sampled, args.ratios, seed=args.seed)
    write_dataset(args.out, train_, valid, test)
    print((Path(args.out) / "sparsity.json").read_text())
    return 0


def cmd_inspect_graph(args) -> int:
    kg = _load_kg(args.data)
    print(kg.sparsity_report().to_json())
    for name in args.entity or []:
        try:
            e = kg.vocab.entity_id(name)
        except KeyError as exc:
            raise CLIError(f"unknown entity {name!r}") from exc
        space = kg.actions_of(e)
        print(f"{name}: " + ", ".join(f"({kg.vocab.relations[r]}, {kg.vocab.entities[t]})" for r, t in space.as_pairs()))
    return 0


# -- train-kge ----------------------------------------------------------------------------

def cmd_train_kge(args) -> int:
    kg = _load_kg(args.data)
    overrides = {"kind": args.kind, "dim": args.dim, "epochs": args.epochs, "lr": args.lr,
                 "batch_size": args.batch_size, "seed": args.seed, "patience": args.patience}
    cfg = KGEConfig.from_dict(merge(KGEConfig().to_dict() | _read_json(args.config), overrides))
    out = _prepare_run_dir(args.out)
    (out / "config.json").write_text(json.dumps({"data": str(Path(args.data).resolve()), "kge": cfg.to_dict()}, indent=2))
    (out / "seed").write_text(f"{cfg.seed}\n")
    with open(out / "kge_epochs.jsonl", "w") as log:
        model, _ = train_kge(kg, cfg=cfg, log_fn=lambda rec: log.write(json.dumps(rec) + "\n"))
    model.save(out / "kge")
    metrics = {split: evaluate_kge(model, kg, split).metrics() for split in ("valid", "test")}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    print(json.dumps(metrics, sort_keys=True))
    return 0


# -- train-agent ----------------------------------------------------------------------------

def _train_overrides(args) -> dict:
    return {
        "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr, "horizon": args.horizon,
        "rollouts": args.rollouts, "entropy_weight": args.entropy_weight, "baseline": args.baseline,
        "beam_width": args.beam_width, "seed": args.seed,
        "reward_shaping": None if args.reward_shaping is None else args.reward_shaping == "on",
        "anticipation": {"strategy": args.anticipation},
        "completion": {"alpha": args.completion_alpha, "max_actions": args.completion_max, "k": args.completion_k},
        "policy": {"dim": args.dim, "hidden": args.hidden, "layers": args.layers, "mlp_hidden": args.mlp_hidden,
                   "action_dropout": args.action_dropout},
    }


def _kge_path(path) -> Path:
    p = Path(path)
    if (p / "kge" / "manifest.json").exists():
        return p / "kge"
    if (p / "manifest.json").exists():
        return p
    raise CLIError(f"no KGE checkpoint at {p}")


def _run_agent(kg, model, cfg: TrainConfig, out: Path, data, kge) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"data": str(Path(data).resolve()), "kge": str(Path(kge).resolve()),
                                                 "train": cfg.to_dict()}, indent=2))
    (out / "seed").write_text(f"{cfg.seed}\n")
    with open(out / "epochs.jsonl", "w") as log:
        def on_epoch(rep):
            log.write(rep.to_json() + "\n")
            log.flush()
            logger.info("epoch %d reward %.3f dc %.3f valid_hits10 %s", rep.epoch, rep.mean_reward, rep.dc_ratio,
                        rep.valid_hits10)

        agent, _ = train(kg, model, cfg, on_epoch=on_epoch)
    agent.policy.save(out / "policy", seed=cfg.seed, step=cfg.epochs)
    metrics = {}
    for split in ("valid", "test"):
        if len(kg.split(split)):
            metrics[split] = evaluate(agent, kg, split, beam_width=cfg.beam_width, seed=cfg.seed).metrics()
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    return metrics


def cmd_train_agent(args) -> int:
    kg = _load_kg(args.data)
    kge = _kge_path(args.kge)
    model = ScoreModel.load(kge)
    if model.n_entities != kg.n_entities or model.n_relations != kg.n_relations:
        raise CLIError("KGE checkpoint does not match the dataset vocabulary")
    base = merge(TrainConfig().to_dict(), _read_json(args.config))
    base = merge(base, _train_overrides(args))
    out = _prepare_run_dir(args.out)
    if not args.grid:
        metrics = _run_agent(kg, model, TrainConfig.from_dict(base), out, args.data, kge)
        print(json.dumps(metrics, sort_keys=True))
        return 0
    rows = []
    for alpha, m, k in itertools.product(args.grid_alpha, args.grid_max, args.grid_k):
        cfg = TrainConfig.from_dict(merge(base, {"completion": {"alpha": alpha, "max_actions": m, "k": k}}))
        name = f"alpha{alpha}_M{m}_k{k}"
        metrics = _run_agent(kg, model, cfg, out / name, args.data, kge)
        rows.append({"run": name, "alpha": alpha, "max_actions": m, "k": k,
                     "valid_hits10": metrics.get("valid", {}).get("hits10", 0.0),
                     "valid_mrr": metrics.get("valid", {}).get("mrr", 0.0)})
    best = max(rows, key=lambda r: (r["valid_hits10"], r["valid_mrr"]))
    write_csv(out / "grid.csv", rows)
    (out / "grid_best.json").write_text(json.dumps(best, indent=2))
    print(json.dumps(best, sort_keys=True))
    return 0


# -- evaluate / analyze ----------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    run = Path(args.run)
    if not (run / "config.json").exists():
        raise CLIError(f"not a run directory (no config.json): {run}")
    snap = json.loads((run / "config.json").read_text())
    if "train" not in snap:
        raise CLIError(f"{run} is not an agent run")
    cfg = TrainConfig.from_dict(snap["train"])
    kg = _load_kg(args.data or snap["data"])
    model = ScoreModel.load(snap["kge"])
    policy = PolicyNetwork.load(run / "policy")
    agent = build_agent(kg, model, cfg, policy)
    width = args.beam_width or cfg.beam_width
    triples = kg.split(args.split)
    result, beams = evaluate(agent, kg, args.split, beam_width=width, seed=cfg.seed, keep_beams=True)
    stem = args.out_prefix or f"eval_{args.split}"
    write_metrics(run / f"{stem}_metrics.json", result, {"split": args.split, "beam_width": width})
    write_ranks(run / f"{stem}_ranks.csv", triples, result, kg.vocab)
    if args.paths:
        write_paths(run / f"{stem}_paths.txt", triples, beams, kg.vocab, top=args.paths)
    print(json.dumps(result.metrics(), sort_keys=True))
    return 0


def cmd_analyze(args) -> int:
    runs = []
    for d in args.runs:
        d = Path(d)
        log, conf = d / "epochs.jsonl", d / "config.json"
        if not log.exists() or not conf.exists():
            raise CLIError(f"missing training log in {d}")
        alpha = json.loads(conf.read_text())["train"]["completion"]["alpha"]
        runs.append({"name": d.name, "alpha": alpha, "reports": read_reports(log)})
    by_epoch, by_alpha = dc_hits_analysis(runs, last=args.last)
    out = _prepare_run_dir(args.out)
    write_csv(out / "dc_ratio_by_epoch.csv", by_epoch)
    write_csv(out / "dc_ratio_by_alpha.csv", by_alpha)
    for row in by_alpha:
        print(f"alpha={row['alpha']}\tdc_ratio={row['dc_ratio']:.4f}")
    return 0


# -- parser -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dackgr", description="Multi-hop KG reasoning with dynamic anticipation and completion")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-synthetic", help="write the synthetic compositional KG")
    s.add_argument("--out", required=True)
    s.add_argument("--heads", type=int, default=90)
    s.add_argument("--mids", type=int, default=90)
    s.add_argument("--groups", type=int, default=10)
    s.add_argument("--noise", type=int, default=60)
    s.add_argument("--held-out", type=float, default=0.2)
    s.add_argument("--sparsify", type=float, default=0.0, help="fraction of r2 edges to remove")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("sample-dataset", help="sample a sparse dataset and resplit it")
    s.add_argument("--input", nargs="+", required=True, help="TSV triple files (head, relation, tail)")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("retain", "entities"), default="retain")
    s.add_argument("--fraction", type=float, default=0.1)
    s.add_argument("--seed-entities", help="file with one seed entity per line")
    s.add_argument("--seed-fraction", type=float, default=0.1, help="random seed share when no seed file is given")
    s.add_argument("--rounds", type=int, default=0)
    s.add_argument("--neighbor-fraction", type=float, default=1.0)
    s.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample_dataset)

    s = sub.add_parser("inspect-graph", help="print sparsity statistics and action spaces")
    s.add_argument("--data", required=True)
    s.add_argument("--entity", action="append")
    s.set_defaults(func=cmd_inspect_graph)

    s = sub.add_parser("train-kge", help="pretrain TransE/DistMult/ConvE")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--kind", choices=KINDS)
    s.add_argument("--dim", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_kge)

    s = sub.add_parser("train-agent", help="train the reasoning agent with REINFORCE")
    s.add_argument("--data", required=True)
    s.add_argument("--kge", required=True, help="train-kge run directory or checkpoint directory")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--horizon", type=int)
    s.add_argument("--rollouts", type=int)
    s.add_argument("--entropy-weight", type=float)
    s.add_argument("--baseline", choices=BASELINES)
    s.add_argument("--reward-shaping", choices=("on", "off"))
    s.add_argument("--beam-width", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--anticipation", choices=ANTICIPATION_STRATEGIES)
    s.add_argument("--completion-alpha", type=float, help="0 disables completion")
    s.add_argument("--completion-max", type=int)
    s.add_argument("--completion-k", type=int)
    s.add_argument("--dim", type=int)
    s.add_argument("--hidden", type=int)
    s.add_argument("--layers", type=int)
    s.add_argument("--mlp-hidden", type=int)
    s.add_argument("--action-dropout", type=float)
    s.add_argument("--grid", action="store_true", help="run the alpha/M/k grid and keep the best valid Hits@10")
    s.add_argument("--grid-alpha", type=float, nargs="+", default=list(ALPHA_GRID))
    s.add_argument("--grid-max", type=int, nargs="+", default=list(MAX_ACTIONS_GRID))
    s.add_argument("--grid-k", type=int, nargs="+", default=list(TOP_K_GRID))
    s.set_defaults(func=cmd_train_agent)

    s = sub.add_parser("evaluate", help="rank a split with beam search from a run directory")
    s.add_argument("--run", required=True)
    s.add_argument("--split", choices=("valid", "test"), default="test")
    s.add_argument("--data", help="override the dataset directory stored in the run")
    s.add_argument("--beam-width", type=int)
    s.add_argument("--paths", type=int, default=0, help="dump the top-N reasoning paths per query")
    s.add_argument("--out-prefix")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("analyze", help="DC hits ratio tables over training runs")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--last", type=int, default=5)
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, GraphParseError, SamplingError, FileNotFoundError, ValueError, KeyError,
            TrainingDivergedError) as e:
        print(f"dackgr {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
