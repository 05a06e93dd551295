"""Knowledge-graph store: vocabularies, adjacency, filtering sets, sparsity stats.

Relation ids are laid out as ``[base relations | inverse relations | LOOP]``:
base relation ``r`` has inverse ``r + n_base`` and the self-loop is ``2 * n_base``.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LOOP = "LOOP"
INVERSE_SUFFIX = "_inv"

# origin flags for actions
GRAPH, SELF_LOOP, COMPLETION = 0, 1, 2


class GraphParseError(ValueError):
    def __init__(self, path, line_no: int, line: str, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}: {line!r}")
        self.path = path
        self.line_no = line_no


@dataclass
class Vocab:
    entities: list[str] = field(default_factory=list)
    base_relations: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.entity_index = {e: i for i, e in enumerate(self.entities)}
        self.relation_index = {r: i for i, r in enumerate(self.relations)}

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_base(self) -> int:
        return len(self.base_relations)

    @property
    def n_relations(self) -> int:
        """All relation ids models see: base, inverses and LOOP."""
        return 2 * self.n_base + 1

    @property
    def loop_id(self) -> int:
        return 2 * self.n_base

    @property
    def relations(self) -> list[str]:
        return self.base_relations + [r + INVERSE_SUFFIX for r in self.base_relations] + [LOOP]

    def inverse(self, rel: int) -> int:
        if rel == self.loop_id:
            return rel
        return rel + self.n_base if rel < self.n_base else rel - self.n_base

    def is_base(self, rel: int) -> bool:
        return 0 <= rel < self.n_base

    def entity_id(self, name: str) -> int:
        return self.entity_index[name]

    def relation_id(self, name: str) -> int:
        return self.relation_index[name]

    def dump(self, directory) -> None:
        """Write ``entities.tsv`` and ``relations.tsv`` as (name, id) pairs."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "entities.tsv", "w", encoding="utf-8") as f:
            f.writelines(f"{e}\t{i}\n" for i, e in enumerate(self.entities))
        with open(directory / "relations.tsv", "w", encoding="utf-8") as f:
            f.writelines(f"{r}\t{i}\n" for i, r in enumerate(self.relations))


@dataclass
class SparsityReport:
    entities: int
    relations: int
    facts: int
    mean_out_degree: float
    median_out_degree: float
    # mean over entities with at least one outgoing train edge
    mean_out_degree_sources: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


@dataclass
class ActionSpace:
    """Ordered (relation, entity) actions with their origins."""

    relations: np.ndarray
    entities: np.ndarray
    origins: np.ndarray

    def __len__(self) -> int:
        return len(self.relations)

    def as_pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.relations.tolist(), self.entities.tolist()))


class KnowledgeGraph:
    """Immutable after construction.

    ``train``, ``valid`` and ``test`` are ``(n, 3)`` int arrays of
    (head, relation, tail) with base relation ids only.
    """

    def __init__(self, vocab: Vocab, train: np.ndarray, valid: np.ndarray, test: np.ndarray,
                 max_out_degree: int | None = None):
        self.vocab = vocab
        self.train = np.asarray(train, dtype=np.int64).reshape(-1, 3)
        self.valid = np.asarray(valid, dtype=np.int64).reshape(-1, 3)
        self.test = np.asarray(test, dtype=np.int64).reshape(-1, 3)
        self.max_out_degree = max_out_degree
        self._build_adjacency()
        self._build_filters()

    # -- construction ----------------------------------------------------
    def _build_adjacency(self) -> None:
        n_e = self.vocab.n_entities
        edges = [[] for _ in range(n_e)]
        for h, r, t in self.train.tolist():
            edges[h].append((r, t))
            edges[t].append((self.vocab.inverse(r), h))
        for i, lst in enumerate(edges):
            lst.sort()
            if self.max_out_degree is not None and len(lst) > self.max_out_degree:
                edges[i] = lst[: self.max_out_degree]
        self.adjacency: list[list[tuple[int, int]]] = edges
        degree = np.array([len(e) for e in edges], dtype=np.int64)
        width = int(degree.max(initial=0)) + 1
        self.adj_relations = np.zeros((n_e, width), dtype=np.int64)
        self.adj_entities = np.zeros((n_e, width), dtype=np.int64)
        self.adj_mask = np.zeros((n_e, width), dtype=bool)
        for i, lst in enumerate(edges):
            if lst:
                arr = np.asarray(lst, dtype=np.int64)
                self.adj_relations[i, : len(lst)] = arr[:, 0]
                self.adj_entities[i, : len(lst)] = arr[:, 1]
                self.adj_mask[i, : len(lst)] = True
        self.degree = degree
        # membership set covers every train fact and inverse, even past a degree cap
        h, r, t = self.train.T
        inv = np.array([self.vocab.inverse(x) for x in r.tolist()], dtype=np.int64)
        keys = np.concatenate([self.fact_key(h, r, t), self.fact_key(t, inv, h)])
        self._edge_keys = np.unique(keys.astype(np.int64))

    def _build_filters(self) -> None:
        answers: dict[tuple[int, int], set[int]] = defaultdict(set)
        for split in (self.train, self.valid, self.test):
            for h, r, t in split.tolist():
                answers[(h, r)].add(t)
                answers[(t, self.vocab.inverse(r))].add(h)
        self._answers = dict(answers)
        train_answers: dict[tuple[int, int], set[int]] = defaultdict(set)
        for h, r, t in self.train.tolist():
            train_answers[(h, r)].add(t)
            train_answers[(t, self.vocab.inverse(r))].add(h)
        self._train_answers = dict(train_answers)

    # -- queries ---------------------------------------------------------
    @property
    def n_entities(self) -> int:
        return self.vocab.n_entities

    @property
    def n_relations(self) -> int:
        return self.vocab.n_relations

    def fact_key(self, h, r, t):
        """Scalar encoding of a triple; works elementwise on arrays."""
        n_e = self.vocab.n_entities
        return (np.asarray(h, dtype=np.int64) * self.vocab.n_relations + r) * n_e + t

    def has_edge(self, h, r, t) -> np.ndarray:
        """Vectorised membership test against the adjacency (train facts and inverses)."""
        keys = np.asarray(self.fact_key(h, r, t))
        if self._edge_keys.size == 0:
            return np.zeros(keys.shape, dtype=bool)
        pos = np.searchsorted(self._edge_keys, keys)
        pos = np.minimum(pos, self._edge_keys.size - 1)
        return self._edge_keys[pos] == keys

    def actions_of(self, entity: int) -> ActionSpace:
        lst = self.adjacency[entity]
        rels = np.array([r for r, _ in lst] + [self.vocab.loop_id], dtype=np.int64)
        ents = np.array([e for _, e in lst] + [entity], dtype=np.int64)
        origins = np.full(len(rels), GRAPH, dtype=np.int64)
        origins[-1] = SELF_LOOP
        return ActionSpace(rels, ents, origins)

    def filter_candidates(self, head: int, relation: int) -> set[int]:
        """Every known tail of ``(head, relation)`` across all splits."""
        return set(self._answers.get((head, relation), ()))

    def train_answers(self, head: int, relation: int) -> set[int]:
        return set(self._train_answers.get((head, relation), ()))

    def sparsity_report(self) -> SparsityReport:
        return sparsity_report(self)

    def split(self, name: str) -> np.ndarray:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


def sparsity_report(kg: KnowledgeGraph) -> SparsityReport:
    n_e = kg.vocab.n_entities
    out_deg = np.bincount(kg.train[:, 0], minlength=n_e) if len(kg.train) else np.zeros(n_e, dtype=np.int64)
    facts = int(len(kg.train))
    sources = out_deg[out_deg > 0]
    return SparsityReport(
        entities=n_e,
        relations=kg.vocab.n_base,
        facts=facts,
        mean_out_degree=facts / n_e if n_e else 0.0,
        median_out_degree=float(np.median(out_deg)) if n_e else 0.0,
        mean_out_degree_sources=float(sources.mean()) if sources.size else 0.0,
    )


# -- loading -----------------------------------------------------------------

def read_triples(path, fmt: str = "hrt") -> list[tuple[str, str, str]]:
    """Read a tab-separated triple file.

    ``fmt`` gives the column order: ``hrt`` (head, relation, tail) or ``htr``.
    Blank lines are skipped.
    """
    if fmt not in ("hrt", "htr"):
        raise ValueError(f"unknown triple format {fmt!r}")
    triples = []
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise GraphParseError(path, line_no, line, "expected head<TAB>relation<TAB>tail")
            h, a, b = (p.strip() for p in parts)
            triples.append((h, a, b) if fmt == "hrt" else (h, b, a))
    return triples


def write_triples(path, triples: Iterable[Sequence[str]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(f"{h}\t{r}\t{t}\n" for h, r, t in triples)


def _dedupe(triples, split_name: str):
    seen = set()
    out = []
    for tr in triples:
        if tr in seen:
            continue
        seen.add(tr)
        out.append(tr)
    if len(out) != len(triples):
        logger.warning("dropped %d duplicate triples from %s", len(triples) - len(out), split_name)
    return out


def build_graph(train, valid=(), test=(), max_out_degree: int | None = None) -> KnowledgeGraph:
    """Build a graph from string triples; ids follow first appearance over train, valid, test."""
    splits = [_dedupe(list(map(tuple, s)), name) for s, name in ((train, "train"), (valid, "valid"), (test, "test"))]
    ents: dict[str, int] = {}
    rels: dict[str, int] = {}
    for split in splits:
        for h, r, t in split:
            ents.setdefault(h, len(ents))
            rels.setdefault(r, len(rels))
            ents.setdefault(t, len(ents))
    clash = [r for r in rels if r == LOOP or (r.endswith(INVERSE_SUFFIX) and r[: -len(INVERSE_SUFFIX)] in rels)]
    if clash:
        raise ValueError(f"relation names collide with reserved names: {clash[:5]}")
    vocab = Vocab(list(ents), list(rels))
    arrays = [np.array([(ents[h], rels[r], ents[t]) for h, r, t in s], dtype=np.int64).reshape(-1, 3) for s in splits]
    return KnowledgeGraph(vocab, *arrays, max_out_degree=max_out_degree)


def load_graph(train_path, valid_path=None, test_path=None, fmt: str = "hrt",
               max_out_degree: int | None = None) -> KnowledgeGraph:
    train = read_triples(train_path, fmt)
    valid = read_triples(valid_path, fmt) if valid_path else []
    test = read_triples(test_path, fmt) if test_path else []
    return build_graph(train, valid, test, max_out_degree=max_out_degree)


def load_dataset_dir(directory, fmt: str = "hrt", max_out_degree: int | None = None) -> KnowledgeGraph:
    """Load ``train.txt``/``valid.txt``/``test.txt`` (``.tsv`` also accepted) from a directory."""
    directory = Path(directory)

    def pick(stem):
        for ext in (".txt", ".tsv"):
            p = directory / f"{stem}{ext}"
            if p.exists():
                return p
        return None

    train = pick("train")
    if train is None:
        raise FileNotFoundError(f"no train.txt or train.tsv in {directory}")
    return load_graph(train, pick("valid"), pick("test"), fmt=fmt, max_out_degree=max_out_degree)
