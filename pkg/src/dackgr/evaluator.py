"""Beam-search inference, filtered ranking, reasoning-path dumps and DC-hits analysis."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from dackgr.agent import Agent, EpisodeTrace
from dackgr.env import BatchActionSpace
from dackgr.kg import COMPLETION, KnowledgeGraph, Vocab
from dackgr.nn import no_grad
from dackgr.ranking import RankingResult, rank_reached


@dataclass
class BeamEntry:
    entities: list[int]  # e_0 .. e_T
    relations: list[int]  # r_1 .. r_T
    log_prob: float
    origins: list[int] = field(default_factory=list)

    @property
    def terminal(self) -> int:
        return self.entities[-1]


def _rows(space: BatchActionSpace, rows: np.ndarray) -> BatchActionSpace:
    return BatchActionSpace(space.relations[rows], space.entities[rows], space.mask[rows],
                            space.origins[rows], space.att_col[rows])


def beam_search(agent: Agent, head: int, relation: int, beam_width: int,
                rng: np.random.Generator | None = None) -> list[BeamEntry]:
    """Top ``beam_width`` fixed-length paths by cumulative log-probability.

    Candidates are ordered by descending score, ties by (beam, action) position.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    env = agent.env
    agent.policy.eval()
    with no_grad():
        state = agent.start([head], [relation], None, rng)
        cum = np.zeros(1)
        for _ in range(env.horizon):
            space, logp, _ = agent.decide(state, training=False)
            lp = np.where(space.mask, logp.data.astype(np.float64), -np.inf)
            flat = (cum[:, None] + lp).ravel()
            order = np.argsort(-flat, kind="stable")
            order = order[np.isfinite(flat[order])][:beam_width]
            parents, choice = np.divmod(order, space.width)
            state = env.step(state.select(parents), _rows(space, parents), choice, agent.policy)
            cum = flat[order]
    agent.policy.train()
    ents = np.stack([state.heads] + state.path_ents, axis=1)
    rels = np.stack(state.path_rels, axis=1)
    origins = np.stack(state.path_origins, axis=1)
    return [BeamEntry(ents[i].tolist(), rels[i].tolist(), float(cum[i]), origins[i].tolist()) for i in range(len(cum))]


def entity_scores(beams: Iterable[BeamEntry]) -> dict[int, float]:
    """Best path log-probability per terminal entity."""
    best: dict[int, float] = {}
    for b in beams:
        if b.terminal not in best or b.log_prob > best[b.terminal]:
            best[b.terminal] = b.log_prob
    return best


def query_rank(agent: Agent, kg: KnowledgeGraph, head: int, relation: int, gold: int, beam_width: int,
               rng: np.random.Generator) -> tuple[float, list[BeamEntry]]:
    beams = beam_search(agent, head, relation, beam_width, rng)
    rank = rank_reached(entity_scores(beams), gold, kg.n_entities, kg.filter_candidates(head, relation))
    return rank, beams


def evaluate(agent: Agent, kg: KnowledgeGraph, split: str = "test", beam_width: int = 32, seed: int = 0,
             triples: np.ndarray | None = None, keep_beams: bool = False):
    """Filtered tail-ranking metrics from beam search over ``split``.

    Returns a :class:`RankingResult`; with ``keep_beams`` also the per-query beams.
    """
    triples = kg.split(split) if triples is None else np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    ranks, all_beams = [], []
    for h, r, t in triples.tolist():
        rank, beams = query_rank(agent, kg, h, r, t, beam_width, rng)
        ranks.append(rank)
        if keep_beams:
            all_beams.append(beams)
    result = RankingResult.from_ranks(ranks)
    return (result, all_beams) if keep_beams else result


# -- output formats ----------------------------------------------------------------

def format_path(beam: BeamEntry, vocab: Vocab, gold: int | None = None) -> str:
    """``e0 --r1--> e1 --r2--> e2``; completion steps are starred, a gold terminal is underscored."""
    parts = [vocab.entities[beam.entities[0]]]
    for i, (r, e) in enumerate(zip(beam.relations, beam.entities[1:])):
        rel = vocab.relations[r]
        star = "*" if beam.origins and beam.origins[i] == COMPLETION else ""
        name = vocab.entities[e]
        if gold is not None and i == len(beam.relations) - 1 and e == gold:
            name = f"_{name}_"
        parts.append(f"--{star}{rel}{star}--> {name}")
    return " ".join(parts)


def write_metrics(path, result: RankingResult, extra: dict | None = None) -> None:
    d = result.metrics()
    d.update(extra or {})
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True))


def write_ranks(path, triples: np.ndarray, result: RankingResult, vocab: Vocab) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["head", "relation", "tail", "rank"])
        for (h, r, t), rank in zip(np.asarray(triples).tolist(), result.ranks):
            w.writerow([vocab.entities[h], vocab.relations[r], vocab.entities[t], rank])


def write_paths(path, triples: np.ndarray, beams: Sequence[list[BeamEntry]], vocab: Vocab, top: int = 3) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for (h, r, t), bs in zip(np.asarray(triples).tolist(), beams):
            f.write(f"Query: ({vocab.entities[h]}, {vocab.relations[r]}, ?)  gold={vocab.entities[t]}\n")
            for i, b in enumerate(bs[:top], start=1):
                f.write(f"  {i}  [{b.log_prob:.4f}]  {format_path(b, vocab, gold=t)}\n")
            f.write("\n")


# -- DC hits analysis -------------------------------------------------------------------

def dc_hits_ratio(traces: Iterable[EpisodeTrace]) -> float:
    """Completion-origin choices over all choices."""
    comp = total = 0
    for tr in traces:
        comp += sum(tr.dc_hits)
        total += len(tr.origins)
    return comp / total if total else 0.0


def dc_hits_analysis(runs: Sequence[dict], last: int = 5) -> tuple[list[dict], list[dict]]:
    """Ratio-vs-epoch and ratio-vs-alpha tables.

    Each run is ``{"name": str, "alpha": float, "reports": [EpochReport or dict, ...]}``.
    The per-alpha value averages the last ``last`` epochs of each run (runs
    sharing an alpha are averaged together).
    """
    if not runs:
        raise ValueError("dc_hits_analysis: no training logs given")
    by_epoch, by_alpha = [], {}
    for run in runs:
        reports = [r if isinstance(r, dict) else vars(r) for r in run["reports"]]
        if not reports:
            raise ValueError(f"dc_hits_analysis: run {run.get('name')} has no epoch reports")
        for rep in reports:
            by_epoch.append({"run": run.get("name", ""), "alpha": run["alpha"], "epoch": rep["epoch"],
                             "dc_ratio": rep["dc_ratio"]})
        tail = reports[-last:]
        comp = sum(r["completion_choices"] for r in tail)
        total = sum(r["total_choices"] for r in tail)
        ratio = comp / total if total else float(np.mean([r["dc_ratio"] for r in tail]))
        by_alpha.setdefault(run["alpha"], []).append(ratio)
    alpha_rows = [{"alpha": a, "dc_ratio": float(np.mean(v)), "runs": len(v)} for a, v in sorted(by_alpha.items())]
    return by_epoch, alpha_rows


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
