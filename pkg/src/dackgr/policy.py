"""Policy network with dynamic anticipation and the dynamic-completion proposer.

State vector: ``[e_p; r_q; e_t; h_t]`` (``e_p`` omitted when anticipation is
off).  Action probabilities: ``softmax(A_t · W1 ReLU(W2 s_t))`` where each row
of ``A_t`` is ``[r; e]``.  Completion picks relations by an attention
distribution over all base relations, then asks the frozen KGE for the top-k
tails of each.
"""

from __future__ import annotations

import numpy as np

from dackgr.config import AnticipationConfig, CompletionConfig, PolicyConfig
from dackgr.kg import KnowledgeGraph
from dackgr.kge import ScoreModel
from dackgr.nn import LSTM, Embedding, Linear, Module, Tensor, load_checkpoint, save_checkpoint
from dackgr.nn import functional as F
from dackgr.nn.layers import LSTMState


class PolicyNetwork(Module):
    def __init__(self, n_entities: int, n_relations: int, cfg: PolicyConfig | None = None,
                 anticipation_dim: int = 0, rng: np.random.Generator | None = None):
        cfg = cfg or PolicyConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = np.dtype(cfg.dtype)
        self.cfg = cfg
        self.dtype = dtype
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.anticipation_dim = anticipation_dim
        self.start_relation = n_relations  # extra row: start token for the history LSTM
        d = cfg.dim
        self.entity = Embedding(n_entities, d, rng, dtype=dtype)
        self.relation = Embedding(n_relations + 1, d, rng, dtype=dtype)
        self.lstm = LSTM(2 * d, cfg.hidden, cfg.layers, rng, dtype=dtype)
        self.state_dim = anticipation_dim + 2 * d + cfg.hidden
        self.w2 = Linear(self.state_dim, cfg.mlp_hidden, rng, dtype=dtype)
        self.w1 = Linear(cfg.mlp_hidden, 2 * d, rng, dtype=dtype)
        # relation-attention MLP for completion; separate from w1/w2
        self.att_in = Linear(self.state_dim, cfg.mlp_hidden, rng, dtype=dtype)
        self.att_out = Linear(cfg.mlp_hidden, d, rng, dtype=dtype)

    # -- history -------------------------------------------------------------
    def action_embedding(self, rels, ents) -> Tensor:
        return F.concat([self.relation(rels), self.entity(ents)], axis=-1)

    def initial_history(self, heads) -> tuple[Tensor, LSTMState]:
        heads = np.asarray(heads, dtype=np.int64)
        start = np.full(len(heads), self.start_relation, dtype=np.int64)
        return self.lstm.step(self.action_embedding(start, heads), self.lstm.zero_state(len(heads)))

    def update_history(self, lstm_state: LSTMState, rels, ents) -> tuple[Tensor, LSTMState]:
        return self.lstm.step(self.action_embedding(rels, ents), lstm_state)

    # -- state and scoring -----------------------------------------------------
    def encode_state(self, query_rels, current, history: Tensor, anticipation: np.ndarray | None = None) -> Tensor:
        parts = []
        if self.anticipation_dim:
            if anticipation is None or anticipation.shape[-1] != self.anticipation_dim:
                raise ValueError(f"encode_state: anticipation vector of width {self.anticipation_dim} required")
            parts.append(F.stop_gradient(Tensor(np.asarray(anticipation, dtype=self.dtype))))
        parts += [self.relation(query_rels), self.entity(current), history]
        return F.concat(parts, axis=-1)

    def action_logits(self, state: Tensor, rels: np.ndarray, ents: np.ndarray) -> Tensor:
        """Logits ``A_t · W1 ReLU(W2 s_t)`` for a padded (B, A) action batch, clipped to +-50."""
        b, a = rels.shape
        actions = self.action_embedding(rels, ents)  # (B, A, 2d)
        q = self.w1(F.relu(self.w2(state)))  # (B, 2d)
        logits = F.matmul(actions, q.reshape(b, 2 * self.cfg.dim, 1)).reshape(b, a)
        return F.clip(logits, -F.LOGIT_CLIP, F.LOGIT_CLIP)

    def action_log_probs(self, state: Tensor, rels, ents, mask) -> Tensor:
        if not np.asarray(mask).any(axis=-1).all():
            raise ValueError("score_actions: empty action space")
        return F.log_softmax(self.action_logits(state, rels, ents), mask=mask)

    def relation_attention(self, state: Tensor, candidates: np.ndarray) -> Tensor:
        """Distribution ``w`` over ``candidates``: softmax(MLP(s_t) · [r_1..r_n])."""
        query = self.att_out(F.relu(self.att_in(state)))  # (B, d)
        rel = self.relation(np.asarray(candidates, dtype=np.int64))  # (C, d)
        return F.softmax(F.matmul(query, rel.T), axis=-1)

    # -- persistence -------------------------------------------------------------
    def save(self, path, meta: dict | None = None, seed: int | None = None, step: int = 0):
        m = dict(meta or {})
        m.update({"n_entities": self.n_entities, "n_relations": self.n_relations,
                  "anticipation_dim": self.anticipation_dim, "policy": vars(self.cfg).copy()})
        return save_checkpoint(path, self.state_dict(), seed=seed, step=step, meta=m)

    @classmethod
    def load(cls, path) -> "PolicyNetwork":
        state, manifest = load_checkpoint(path)
        meta = manifest["meta"]
        net = cls(meta["n_entities"], meta["n_relations"], PolicyConfig(**meta["policy"]), meta["anticipation_dim"])
        net.load_state_dict(state)
        return net


# -- module-level operations ------------------------------------------------------

def encode_state(policy: PolicyNetwork, query_rels, current, history: Tensor, anticipation=None) -> Tensor:
    return policy.encode_state(query_rels, current, history, anticipation)


def score_actions(policy: PolicyNetwork, state: Tensor, rels, ents, mask=None) -> np.ndarray:
    """Action probabilities for a single state (1-D inputs) or a padded batch."""
    rels = np.asarray(rels, dtype=np.int64)
    ents = np.asarray(ents, dtype=np.int64)
    single = rels.ndim == 1
    if single:
        rels, ents = rels[None], ents[None]
        if state.ndim == 1:
            state = state.reshape(1, -1)
    if rels.shape[-1] == 0:
        raise ValueError("score_actions: empty action space")
    mask = np.ones(rels.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(rels.shape)
    p = np.exp(policy.action_log_probs(state, rels, ents, mask).data) * mask
    return p[0] if single else p


def anticipate(model: ScoreModel | None, heads, rels, strategy: str | AnticipationConfig,
               rng: np.random.Generator | None = None, dim: int | None = None) -> np.ndarray:
    """Anticipation vectors ``e_p`` from the KGE's tail distribution, one row per query.

    ``sample`` draws an entity from p, ``top-one`` takes its argmax (lowest id
    on ties), ``average`` is the p-weighted mean of entity embeddings, ``off``
    is the zero vector.
    """
    if isinstance(strategy, AnticipationConfig):
        strategy = strategy.strategy
    heads = np.atleast_1d(np.asarray(heads, dtype=np.int64))
    if strategy == "off":
        width = dim if dim is not None else (model.entity_embeddings.shape[1] if model is not None else 0)
        return np.zeros((len(heads), width))
    emb = model.entity_embeddings
    p = model.tail_distribution(heads, rels)
    if strategy == "average":
        return p @ emb
    if strategy == "top-one":
        return emb[np.argmax(p, axis=1)]
    if strategy == "sample":
        return emb[sample_categorical(p, rng)]
    raise ValueError(f"unknown anticipation strategy {strategy!r}")


def sample_categorical(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One inverse-CDF draw per row of (unnormalised, non-negative) ``p``; zero-mass entries are never drawn."""
    cum = np.cumsum(p, axis=1)
    thresh = rng.random(len(p)) * cum[:, -1]
    return np.argmax(cum > thresh[:, None], axis=1)


def completion_budget(n_actions, alpha: float, max_actions: int, k: int):
    """Number of additional actions ``min(ceil(alpha*N), M)`` and relations ``ceil(N_add / k)``.

    Works on scalars or integer arrays.
    """
    n = np.asarray(n_actions)
    # round before ceil so 0.33 * 100 does not become 34 through float noise
    n_add = np.minimum(np.ceil(np.round(alpha * n, 9)).astype(np.int64), max_actions)
    x = -(-n_add // k)
    if n.ndim == 0:
        return int(n_add), int(x)
    return n_add, x


def propose_completions(attention: np.ndarray, candidates: np.ndarray, current: np.ndarray,
                        n_actions: np.ndarray, model: ScoreModel, cfg: CompletionConfig, kg: KnowledgeGraph,
                        forbid: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None):
    """Additional (relation, entity) actions per row.

    ``attention`` is (B, C) over ``candidates``; ``n_actions`` is each row's
    current action-space size N.  For each row the top-x relations by
    attention (ties: lower candidate index) each contribute their top-k KGE
    tails in descending probability; proposals that are existing train edges
    from the current entity are dropped and the rest truncated to N_add.
    ``forbid`` = (mask, rel, ent) removes one specific action per flagged row.

    Returns ``(rels, ents, mask, att_col)`` padded to the widest row, where
    ``att_col`` indexes the candidate that produced each proposal.
    """
    b = len(current)
    empty = (np.zeros((b, 0), dtype=np.int64),) * 2 + (np.zeros((b, 0), dtype=bool), np.zeros((b, 0), dtype=np.int64))
    if not cfg.enabled or b == 0 or len(candidates) == 0:
        return empty
    n_add, x = completion_budget(np.asarray(n_actions), cfg.alpha, cfg.max_actions, cfg.k)
    x = np.minimum(x, len(candidates))
    x_max = int(x.max())
    if x_max == 0:
        return empty
    k = min(cfg.k, kg.n_entities)
    order = np.argsort(-attention, axis=1, kind="stable")[:, :x_max]  # (B, x)
    rel_ids = np.asarray(candidates)[order]
    tails = model.top_k_table(np.repeat(current, x_max), rel_ids.reshape(-1), k).reshape(b, x_max, k)
    rels = np.broadcast_to(rel_ids[:, :, None], tails.shape)
    cols = np.broadcast_to(order[:, :, None], tails.shape)
    heads = np.broadcast_to(current[:, None, None], tails.shape)
    valid = (np.arange(x_max)[None, :, None] < x[:, None, None]) & ~kg.has_edge(heads, rels, tails)
    if forbid is not None:
        fmask, frel, fent = forbid
        valid &= ~(fmask[:, None, None] & (rels == frel[:, None, None]) & (tails == fent[:, None, None]))
    valid = valid.reshape(b, -1)
    keep = valid & (np.cumsum(valid, axis=1) <= n_add[:, None])
    width = int(keep.sum(axis=1).max())
    if width == 0:
        return empty
    pos = np.argsort(~keep, axis=1, kind="stable")[:, :width]
    mask = np.take_along_axis(keep, pos, axis=1)
    pick = lambda a: np.where(mask, np.take_along_axis(a.reshape(b, -1), pos, axis=1), 0)  # noqa: E731
    return pick(rels), pick(tails), mask, pick(cols)
