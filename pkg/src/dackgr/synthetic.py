"""Synthetic compositional KG with a planted two-hop rule.

Entities fall into four pools: heads ``a*``, mids ``b*``, groups ``g*`` and
answers ``c*``.  Each head links to one mid (``r1``), each mid belongs to a
group (``r5``), and every mid of a group points to that group's answer
(``r2``).  The query relation ``rq`` is the composition ``r1 ∘ r2``.  A share
of ``rq`` facts is held out and split between valid and test.  Noise edges
(``r3``) connect random heads and mids.

``sparsify`` removes a fraction of ``r2`` edges.  Within three hops the
answer then stays reachable only through completion, while an embedding
model can still infer the missing edge from group membership.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dackgr.kg import KnowledgeGraph, build_graph, write_triples

Triple = tuple[str, str, str]


@dataclass
class SyntheticSpec:
    n_heads: int = 90
    n_mids: int = 90
    n_groups: int = 10
    n_noise: int = 60
    held_out: float = 0.2
    sparsify: float = 0.0
    seed: int = 0

    @property
    def n_entities(self) -> int:
        # one answer per group
        return self.n_heads + self.n_mids + 2 * self.n_groups


def make_compositional(spec: SyntheticSpec | None = None) -> tuple[list[Triple], list[Triple], list[Triple]]:
    """Return (train, valid, test) string triples."""
    spec = spec or SyntheticSpec()
    if spec.n_heads > spec.n_mids:
        raise ValueError("need at least as many mids as heads (r1 is injective)")
    rng = np.random.default_rng(spec.seed)
    heads = [f"a{i}" for i in range(spec.n_heads)]
    mids = [f"b{i}" for i in range(spec.n_mids)]
    groups = [f"g{i}" for i in range(spec.n_groups)]
    answers = [f"c{i}" for i in range(spec.n_groups)]

    group_of = rng.permutation(np.arange(spec.n_mids) % spec.n_groups)
    mid_of = rng.permutation(spec.n_mids)[: spec.n_heads]

    r1 = [(heads[i], "r1", mids[mid_of[i]]) for i in range(spec.n_heads)]
    r5 = [(mids[j], "r5", groups[group_of[j]]) for j in range(spec.n_mids)]
    r2 = [(mids[j], "r2", answers[group_of[j]]) for j in range(spec.n_mids)]
    rq = [(heads[i], "rq", answers[group_of[mid_of[i]]]) for i in range(spec.n_heads)]

    pool = heads + mids
    noise: set[Triple] = set()
    while len(noise) < spec.n_noise:
        h, t = rng.choice(len(pool), size=2, replace=False)
        noise.add((pool[h], "r3", pool[t]))

    order = rng.permutation(len(rq))
    n_out = int(round(spec.held_out * len(rq)))
    held = [rq[i] for i in sorted(order[:n_out])]
    kept = [rq[i] for i in sorted(order[n_out:])]
    valid, test = held[: n_out // 2], held[n_out // 2:]

    if spec.sparsify > 0:
        drop = set(rng.permutation(len(r2))[: int(round(spec.sparsify * len(r2)))].tolist())
        r2 = [t for i, t in enumerate(r2) if i not in drop]

    train = r1 + r5 + r2 + kept + sorted(noise)
    # groups and answers must appear in train for their embeddings to be trained
    return train, valid, test


def compositional_graph(spec: SyntheticSpec | None = None) -> KnowledgeGraph:
    return build_graph(*make_compositional(spec))


def write_compositional(directory, spec: SyntheticSpec | None = None) -> None:
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, triples in zip(("train", "valid", "test"), make_compositional(spec)):
        write_triples(directory / f"{name}.txt", triples)
