"""Filtered ranking and link-prediction metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass
class RankingResult:
    ranks: list[float] = field(default_factory=list)
    mrr: float = 0.0
    hits1: float = 0.0
    hits3: float = 0.0
    hits10: float = 0.0

    @classmethod
    def from_ranks(cls, ranks: Sequence[float]) -> "RankingResult":
        r = np.asarray(ranks, dtype=np.float64)
        if r.size == 0:
            return cls([], 0.0, 0.0, 0.0, 0.0)
        if np.any(r < 1):
            raise ValueError("ranks must be >= 1")
        return cls(
            ranks=r.tolist(),
            mrr=float(np.mean(1.0 / r)),
            hits1=float(np.mean(r <= 1)),
            hits3=float(np.mean(r <= 3)),
            hits10=float(np.mean(r <= 10)),
        )

    def hits(self, k: int) -> float:
        return float(np.mean(np.asarray(self.ranks) <= k)) if self.ranks else 0.0

    def metrics(self) -> dict[str, float]:
        d = asdict(self)
        d.pop("ranks")
        d["count"] = len(self.ranks)
        return d


def filtered_rank(scores: np.ndarray, gold: int, known: Iterable[int] = ()) -> int:
    """Rank of ``gold`` when entities are ordered by descending score, then ascending id.

    Entities in ``known`` (other correct answers) are removed before ranking;
    ``gold`` itself is always kept.
    """
    scores = np.asarray(scores)
    keep = np.ones(scores.shape[0], dtype=bool)
    known = [k for k in known if k != gold]
    if known:
        keep[np.asarray(known, dtype=np.int64)] = False
    g = scores[gold]
    ids = np.arange(scores.shape[0])
    ahead = keep & ((scores > g) | ((scores == g) & (ids < gold)))
    return int(ahead.sum()) + 1


def rank_reached(entity_scores: dict[int, float], gold: int, n_entities: int,
                 known: Iterable[int] = ()) -> float:
    """Rank of ``gold`` given scores only for entities reached by search.

    Reached entities are ordered by score (ties by id).  Unreached candidates
    sit below every reached one, and an unreached gold gets the expected
    position under a random ordering of the unreached block.
    """
    excluded = {k for k in known if k != gold}
    reached = {e: s for e, s in entity_scores.items() if e not in excluded}
    if gold in reached:
        g = reached[gold]
        ahead = sum(1 for e, s in reached.items() if s > g or (s == g and e < gold))
        return float(ahead + 1)
    unreached = n_entities - len(excluded) - len(reached)
    return len(reached) + (unreached + 1) / 2.0
