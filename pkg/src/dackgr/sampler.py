"""Build sparse benchmark datasets from a triple file.

Two samplers: uniform retention of a fraction of triples, and
entity-neighbourhood sampling from a seed set.  ``resplit`` regenerates
train/valid/test so that every valid/test entity and relation is covered by
train.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from dackgr.kg import build_graph, write_triples

logger = logging.getLogger(__name__)

Triple = tuple[str, str, str]


class SamplingError(ValueError):
    pass


def retain_fraction(triples: Sequence[Triple], fraction: float, seed: int = 0) -> list[Triple]:
    """Uniform sample of ``ceil(fraction * |T|)`` triples, kept in input order."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = math.ceil(round(fraction * len(triples), 9))
    if n == 0:
        raise SamplingError("retain_fraction: empty result")
    keep = np.sort(np.random.default_rng(seed).choice(len(triples), size=n, replace=False))
    return [tuple(triples[i]) for i in keep]


def sample_by_entities(triples: Sequence[Triple], seeds: Iterable[str], rounds: int = 0, seed: int = 0,
                       neighbor_fraction: float = 1.0) -> list[Triple]:
    """Triples incident to the seed entities after ``rounds`` of neighbourhood expansion.

    Each round adds the neighbours of the current set; with
    ``neighbor_fraction < 1`` only that share of the new neighbours (sampled
    uniformly, at least one) is added.
    """
    entities = set(seeds)
    if not entities:
        raise ValueError("sample_by_entities: empty seed set")
    rng = np.random.default_rng(seed)
    for _ in range(rounds):
        new = sorted({t for h, _, t in triples if h in entities} | {h for h, _, t in triples if t in entities}
                     - entities)
        if not new:
            break
        if neighbor_fraction < 1:
            n = max(1, math.ceil(neighbor_fraction * len(new)))
            new = [new[i] for i in np.sort(rng.choice(len(new), size=n, replace=False))]
        entities.update(new)
    return [tuple(tr) for tr in triples if tr[0] in entities or tr[2] in entities]


def _move_uncovered(train: list[Triple], other: list[Triple]) -> tuple[list[Triple], list[Triple]]:
    ents = {h for h, _, _ in train} | {t for _, _, t in train}
    rels = {r for _, r, _ in train}
    keep, moved = [], []
    for tr in other:
        (keep if tr[0] in ents and tr[2] in ents and tr[1] in rels else moved).append(tr)
    return keep, moved


def resplit(triples: Sequence[Triple], ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0,
            max_retries: int = 20) -> tuple[list[Triple], list[Triple], list[Triple]]:
    """Disjoint train/valid/test with every valid/test entity and relation seen in train.

    Uncovered valid/test triples are moved to train.  If that empties a split
    that was asked to be non-empty, the shuffle is redrawn (up to
    ``max_retries`` times).
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    triples = list(dict.fromkeys(tuple(t) for t in triples))
    n = len(triples)
    n_valid = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    rng = np.random.default_rng(seed)
    for attempt in range(max_retries + 1):
        order = rng.permutation(n)
        shuffled = [triples[i] for i in order]
        valid = shuffled[:n_valid]
        test = shuffled[n_valid:n_valid + n_test]
        train = shuffled[n_valid + n_test:]
        # moving triples into train can cover others, so repeat until stable
        while True:
            valid, mv = _move_uncovered(train, valid)
            test, mt = _move_uncovered(train, test)
            if not mv and not mt:
                break
            train += mv + mt
        if (n_valid == 0 or valid) and (n_test == 0 or test):
            if len(valid) < n_valid or len(test) < n_test:
                logger.info("resplit: moved %d uncovered triples to train",
                            n_valid + n_test - len(valid) - len(test))
            return train, valid, test
        logger.debug("resplit attempt %d left a split empty; retrying", attempt)
    raise SamplingError(f"resplit: could not fill valid/test with covered triples after {max_retries} retries")


def write_dataset(directory, train, valid, test) -> Path:
    """Write ``train.txt``/``valid.txt``/``test.txt`` plus ``sparsity.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, split in (("train", train), ("valid", valid), ("test", test)):
        write_triples(directory / f"{name}.txt", split)
    report = build_graph(train, valid, test).sparsity_report()
    (directory / "sparsity.json").write_text(report.to_json())
    return directory
