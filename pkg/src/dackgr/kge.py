"""Embedding score models (TransE, DistMult, ConvE): training and frozen inference.

The frozen :class:`ScoreModel` is what the agent consumes: a tail distribution
for anticipation, top-k tails for completion, and a squashed triple score for
reward shaping.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from dackgr.kg import KnowledgeGraph
from dackgr.nn import Adam, Module, Parameter, backward, load_checkpoint, no_grad, save_checkpoint
from dackgr.nn import functional as F
from dackgr.nn.layers import Embedding, Linear, xavier_uniform
from dackgr.ranking import RankingResult, filtered_rank

logger = logging.getLogger(__name__)

KINDS = ("transe", "distmult", "conve")
SHAPING_CLIP = 30.0


class KGETrainingError(RuntimeError):
    pass


@dataclass
class KGEConfig:
    kind: str = "conve"
    dim: int = 200
    lr: float = 0.003
    epochs: int = 100
    batch_size: int = 128
    label_smoothing: float = 0.1
    negatives: int = 32  # TransE only
    margin: float = 6.0  # TransE gamma
    input_dropout: float = 0.2
    feature_dropout: float = 0.2
    hidden_dropout: float = 0.3
    filters: int = 32
    kernel: int = 3
    eval_every: int = 5
    patience: int = 4
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError(f"unknown KGE kind {self.kind!r}; expected one of {KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "KGEConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, training=self.training)


def _conv_grid(dim: int) -> tuple[int, int]:
    """Reshape ``dim`` into (h, w) with h the largest divisor satisfying 2*h*h <= dim."""
    h = max(d for d in range(1, dim + 1) if dim % d == 0 and 2 * d * d <= dim) if dim >= 2 else 1
    return h, dim // h


class KGEModel(Module):
    def __init__(self, kind: str, n_entities: int, n_relations: int, cfg: KGEConfig,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        dtype = np.dtype(cfg.dtype)
        self.kind = kind
        self.cfg = cfg
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.dim = cfg.dim
        self.dropout_rng = np.random.default_rng(cfg.seed + 1)
        self.entity = Embedding(n_entities, cfg.dim, rng, dtype=dtype)
        self.relation = Embedding(n_relations, cfg.dim, rng, dtype=dtype)
        if kind == "conve":
            self.grid = _conv_grid(cfg.dim)
            gh, gw = self.grid
            k = min(cfg.kernel, 2 * gh, gw)
            self.conv_w = Parameter(xavier_uniform(rng, k * k, cfg.filters * k * k, (cfg.filters, 1, k, k), dtype))
            self.conv_b = Parameter(np.zeros(cfg.filters, dtype=dtype))
            self.flat = cfg.filters * (2 * gh - k + 1) * (gw - k + 1)
            self.fc = Linear(self.flat, cfg.dim, rng, dtype=dtype)
            self.bn0 = BatchNorm(1, dtype)
            self.bn1 = BatchNorm(cfg.filters, dtype)
            self.bn2 = BatchNorm(cfg.dim, dtype)
            self.entity_bias = Parameter(np.zeros(n_entities, dtype=dtype))

    # -- buffers travel with the parameters in checkpoints -----------------
    def _batchnorms(self) -> dict[str, BatchNorm]:
        return {k: v for k, v in vars(self).items() if isinstance(v, BatchNorm)}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = super().state_dict()
        for name, bn in self._batchnorms().items():
            state[f"{name}.running_mean"] = bn.running_mean.copy()
            state[f"{name}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        super().load_state_dict(state)
        for name, bn in self._batchnorms().items():
            bn.running_mean[:] = state[f"{name}.running_mean"]
            bn.running_var[:] = state[f"{name}.running_var"]

    # -- scoring -------------------------------------------------------------
    def _drop(self, x, rate):
        return F.dropout(x, rate, self.dropout_rng, training=self.training)

    def _conve_query(self, heads, rels):
        gh, gw = self.grid
        e = self.entity(heads).reshape(-1, 1, gh, gw)
        r = self.relation(rels).reshape(-1, 1, gh, gw)
        x = F.concat([e, r], axis=2)
        x = self._drop(self.bn0(x), self.cfg.input_dropout)
        x = F.relu(self.bn1(F.conv2d(x, self.conv_w, self.conv_b)))
        x = self._drop(x, self.cfg.feature_dropout)
        x = self.fc(x.reshape(-1, self.flat))
        x = self._drop(x, self.cfg.hidden_dropout)
        return F.relu(self.bn2(x))

    def scores_1n(self, heads, rels, entities: np.ndarray | None = None):
        """Raw scores of every tail (or the given candidate ``entities``) for each (head, rel)."""
        heads = np.asarray(heads, dtype=np.int64)
        rels = np.asarray(rels, dtype=np.int64)
        cand = self.entity.weight if entities is None else self.entity(entities)
        if self.kind == "distmult":
            q = self.entity(heads) * self.relation(rels)
            return F.matmul(q, cand.T)
        if self.kind == "conve":
            q = self._conve_query(heads, rels)
            bias = self.entity_bias if entities is None else F.embedding(self.entity_bias.reshape(-1, 1), entities).reshape(-1)
            return F.matmul(q, cand.T) + bias
        # transe: gamma - ||h + r - t||_1
        q = (self.entity(heads) + self.relation(rels)).reshape(len(heads), 1, self.dim)
        diff = q - cand.reshape(1, -1, self.dim)
        return self.cfg.margin - F.abs(diff).sum(axis=-1)

    def triple_scores(self, heads, rels, tails):
        heads = np.asarray(heads, dtype=np.int64)
        rels = np.asarray(rels, dtype=np.int64)
        tails = np.asarray(tails, dtype=np.int64)
        t = self.entity(tails)
        if self.kind == "distmult":
            return (self.entity(heads) * self.relation(rels) * t).sum(axis=-1)
        if self.kind == "conve":
            q = self._conve_query(heads, rels)
            return (q * t).sum(axis=-1) + F.embedding(self.entity_bias.reshape(-1, 1), tails).reshape(-1)
        return self.cfg.margin - F.abs(self.entity(heads) + self.relation(rels) - t).sum(axis=-1)


class ScoreModel:
    """Frozen, inference-only view of a trained :class:`KGEModel`.

    All outputs are plain numpy arrays; nothing here records gradients.
    """

    def __init__(self, model: KGEModel, chunk: int = 256):
        self.model = model.eval()
        self.kind = model.kind
        self.n_entities = model.n_entities
        self.n_relations = model.n_relations
        self.chunk = chunk
        self._topk: np.ndarray | None = None
        self._topk_p: np.ndarray | None = None
        self._topk_done: np.ndarray | None = None
        self._topk_k = 0

    @property
    def entity_embeddings(self) -> np.ndarray:
        return self.model.entity.weight.data

    def raw_scores(self, heads, rels) -> np.ndarray:
        heads = np.atleast_1d(np.asarray(heads, dtype=np.int64))
        rels = np.atleast_1d(np.asarray(rels, dtype=np.int64))
        out = np.empty((len(heads), self.n_entities), dtype=np.float64)
        with no_grad():
            for s in range(0, len(heads), self.chunk):
                out[s:s + self.chunk] = self.model.scores_1n(heads[s:s + self.chunk], rels[s:s + self.chunk]).data
        return out

    def raw_score(self, heads, rels, tails) -> np.ndarray:
        heads = np.atleast_1d(np.asarray(heads, dtype=np.int64))
        with no_grad():
            return self.model.triple_scores(heads, np.atleast_1d(rels), np.atleast_1d(tails)).data.astype(np.float64)

    def score(self, heads, rels, tails) -> np.ndarray:
        """Sigmoid-squashed triple score in (0, 1); clipped so a wrong answer never reaches 1."""
        z = np.clip(self.raw_score(heads, rels, tails), -SHAPING_CLIP, SHAPING_CLIP)
        return 1.0 / (1.0 + np.exp(-z))

    def tail_distribution(self, heads, rels) -> np.ndarray:
        """Softmax over raw scores of all tails; one row per (head, rel)."""
        s = self.raw_scores(heads, rels)
        s -= s.max(axis=1, keepdims=True)
        p = np.exp(s)
        return p / p.sum(axis=1, keepdims=True)

    def top_k_tails(self, head: int, rel: int, k: int) -> list[tuple[int, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        p = self.tail_distribution([head], [rel])[0]
        order = np.lexsort((np.arange(len(p)), -p))[: min(k, len(p))]
        return [(int(e), float(p[e])) for e in order]

    def top_k_table(self, heads, rels, k: int) -> np.ndarray:
        """Top-``k`` tail ids for each (head, rel) pair, memoised per pair. Shape ``(len(heads), k)``."""
        heads = np.asarray(heads, dtype=np.int64)
        rels = np.asarray(rels, dtype=np.int64)
        k = min(k, self.n_entities)
        if self._topk is None or k > self._topk_k:
            self._topk = np.zeros((self.n_entities, self.n_relations, k), dtype=np.int64)
            self._topk_done = np.zeros((self.n_entities, self.n_relations), dtype=bool)
            self._topk_k = k
        todo = ~self._topk_done[heads, rels]
        if todo.any():
            pairs = np.unique(np.stack([heads[todo], rels[todo]], axis=1), axis=0)
            scores = self.raw_scores(pairs[:, 0], pairs[:, 1])
            ids = np.broadcast_to(np.arange(self.n_entities), scores.shape)
            order = np.lexsort((ids, -scores), axis=1)[:, : self._topk_k]
            self._topk[pairs[:, 0], pairs[:, 1]] = order
            self._topk_done[pairs[:, 0], pairs[:, 1]] = True
        return self._topk[heads, rels, :k]

    # -- persistence -------------------------------------------------------
    def save(self, path, meta: dict | None = None) -> Path:
        m = dict(meta or {})
        m.update({"kind": self.kind, "n_entities": self.n_entities, "n_relations": self.n_relations,
                  "config": self.model.cfg.to_dict()})
        return save_checkpoint(path, self.model.state_dict(), seed=self.model.cfg.seed, meta=m)

    @classmethod
    def load(cls, path) -> "ScoreModel":
        state, manifest = load_checkpoint(path)
        meta = manifest["meta"]
        cfg = KGEConfig.from_dict(meta["config"])
        model = KGEModel(meta["kind"], meta["n_entities"], meta["n_relations"], cfg)
        model.load_state_dict(state)
        return cls(model)


# -- training ------------------------------------------------------------------

def _training_pairs(kg: KnowledgeGraph) -> tuple[np.ndarray, list[np.ndarray]]:
    """(head, rel) pairs from train facts plus inverses, with all train tails per pair."""
    answers: dict[tuple[int, int], list[int]] = {}
    for h, r, t in kg.train.tolist():
        answers.setdefault((h, r), []).append(t)
        answers.setdefault((t, kg.vocab.inverse(r)), []).append(h)
    pairs = np.array(list(answers), dtype=np.int64).reshape(-1, 2)
    return pairs, [np.array(v, dtype=np.int64) for v in answers.values()]


def evaluate_kge(score_model: ScoreModel, kg: KnowledgeGraph, split: str = "valid") -> RankingResult:
    """Filtered tail-ranking metrics of the embedding model alone."""
    triples = kg.split(split)
    if len(triples) == 0:
        return RankingResult.from_ranks([])
    scores = score_model.raw_scores(triples[:, 0], triples[:, 1])
    ranks = [filtered_rank(scores[i], t, kg.filter_candidates(h, r)) for i, (h, r, t) in enumerate(triples.tolist())]
    return RankingResult.from_ranks(ranks)


def train_kge(kg: KnowledgeGraph, kind: str | None = None, cfg: KGEConfig | None = None,
              log_fn=None) -> tuple[ScoreModel, list[dict]]:
    """Train on train facts (with inverses); keep the best-valid-MRR weights.

    ConvE and DistMult use 1-vs-all binary cross-entropy with label smoothing;
    TransE uses a margin loss against uniformly corrupted tails.
    """
    cfg = cfg or KGEConfig()
    if kind is not None:
        cfg = KGEConfig.from_dict({**cfg.to_dict(), "kind": kind})
    rng = np.random.default_rng(cfg.seed)
    model = KGEModel(cfg.kind, kg.n_entities, kg.n_relations, cfg, rng=np.random.default_rng(cfg.seed))
    opt = Adam(model.parameters(), lr=cfg.lr)
    pairs, tails = _training_pairs(kg)
    history: list[dict] = []
    best_state, best_mrr, bad_rounds = model.state_dict(), -1.0, 0
    n_e = kg.n_entities
    if len(pairs) == 0:
        return ScoreModel(model), history

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(pairs))
        total, batches = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            opt.zero_grad()
            if cfg.kind == "transe":
                loss = _transe_loss(model, pairs[idx], tails, idx, rng, cfg)
            else:
                labels = np.zeros((len(idx), n_e), dtype=model.entity.weight.dtype)
                for row, i in enumerate(idx):
                    labels[row, tails[i]] = 1.0
                if cfg.label_smoothing:
                    labels = (1.0 - cfg.label_smoothing) * labels + 1.0 / n_e
                loss = F.bce_with_logits(model.scores_1n(pairs[idx, 0], pairs[idx, 1]), labels)
            value = float(loss.data)
            if not math.isfinite(value):
                raise KGETrainingError(
                    f"{cfg.kind} diverged at epoch {epoch}, batch {batches}: loss={value}; "
                    f"last finite epoch loss={history[-1]['loss'] if history else None}; try a smaller lr (now {cfg.lr})")
            backward(loss)
            opt.step()
            total += value
            batches += 1
        record = {"epoch": epoch, "loss": total / max(batches, 1)}
        if len(kg.valid) and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            res = evaluate_kge(ScoreModel(model), kg, "valid")
            record.update({"valid_mrr": res.mrr, "valid_hits10": res.hits10})
            if res.mrr > best_mrr:
                best_mrr, best_state, bad_rounds = res.mrr, model.state_dict(), 0
            else:
                bad_rounds += 1
        history.append(record)
        if log_fn:
            log_fn(record)
        logger.debug("kge epoch %s", record)
        if bad_rounds >= cfg.patience:
            logger.info("valid MRR plateaued at epoch %d", epoch)
            break
    if len(kg.valid):
        model.load_state_dict(best_state)
    return ScoreModel(model), history


def _transe_loss(model: KGEModel, batch: np.ndarray, tails: list[np.ndarray], idx, rng, cfg: KGEConfig):
    gold = np.array([tails[i][rng.integers(len(tails[i]))] for i in idx], dtype=np.int64)
    neg = rng.integers(0, model.n_entities, size=(len(idx), cfg.negatives))
    pos = model.triple_scores(batch[:, 0], batch[:, 1], gold)
    q = (model.entity(batch[:, 0]) + model.relation(batch[:, 1])).reshape(len(idx), 1, model.dim)
    neg_scores = cfg.margin - F.abs(q - model.entity(neg)).sum(axis=-1)
    # hinge on the score gap; margin 1 between a gold tail and each corruption
    return F.relu(neg_scores - pos.reshape(-1, 1) + 1.0).mean()
