"""The reasoning MDP, batched over episodes.

A batch state holds B queries walking the graph in lockstep for a fixed
horizon T.  Action spaces are padded ``(B, A)`` arrays laid out as
``[graph actions | LOOP | padding | completion actions]`` with a boolean mask
and a per-action origin flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dackgr.config import CompletionConfig
from dackgr.kg import COMPLETION, GRAPH, SELF_LOOP, ActionSpace, KnowledgeGraph
from dackgr.kge import ScoreModel
from dackgr.nn import Tensor
from dackgr.nn.layers import LSTMState
from dackgr.policy import PolicyNetwork, propose_completions


@dataclass
class AgentState:
    heads: np.ndarray
    query_rels: np.ndarray
    golds: np.ndarray | None
    current: np.ndarray
    anticipation: np.ndarray | None
    t: int = 0
    history: Tensor | None = None
    lstm_state: LSTMState | None = None
    path_rels: list[np.ndarray] = field(default_factory=list)
    path_ents: list[np.ndarray] = field(default_factory=list)
    path_origins: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.heads)

    def select(self, rows: np.ndarray) -> "AgentState":
        """Sub-batch (or re-ordered batch) of rows; used to fork beams."""
        rows = np.asarray(rows, dtype=np.int64)
        take = lambda a: None if a is None else a[rows]  # noqa: E731
        return AgentState(
            heads=self.heads[rows], query_rels=self.query_rels[rows], golds=take(self.golds),
            current=self.current[rows], anticipation=take(self.anticipation), t=self.t,
            history=None if self.history is None else self.history[rows],
            lstm_state=None if self.lstm_state is None else [(h[rows], c[rows]) for h, c in self.lstm_state],
            path_rels=[a[rows] for a in self.path_rels], path_ents=[a[rows] for a in self.path_ents],
            path_origins=[a[rows] for a in self.path_origins],
        )


@dataclass
class BatchActionSpace:
    relations: np.ndarray
    entities: np.ndarray
    mask: np.ndarray
    origins: np.ndarray
    att_col: np.ndarray  # candidate-relation column behind each completion action, else -1

    def row(self, i: int) -> ActionSpace:
        m = self.mask[i]
        return ActionSpace(self.relations[i][m], self.entities[i][m], self.origins[i][m])

    @property
    def width(self) -> int:
        return self.relations.shape[1]


class Environment:
    def __init__(self, kg: KnowledgeGraph, model: ScoreModel | None = None,
                 completion: CompletionConfig | None = None, horizon: int = 3,
                 reward_shaping: bool = True, mask_gold_edge: bool = True):
        self.kg = kg
        self.model = model
        self.completion = completion or CompletionConfig(alpha=0.0)
        if self.completion.enabled and model is None:
            raise ValueError("dynamic completion needs a score model")
        self.horizon = horizon
        self.reward_shaping = reward_shaping and model is not None
        self.mask_gold_edge = mask_gold_edge
        self.loop_id = kg.vocab.loop_id
        # completion never proposes LOOP or inverse relations
        self.candidate_relations = np.arange(kg.vocab.n_base, dtype=np.int64)
        # graph actions with LOOP placed right after each entity's edges
        n_e = kg.n_entities
        deg = kg.degree
        width = int(deg.max(initial=0)) + 1
        rels = np.zeros((n_e, width), dtype=np.int64)
        ents = np.zeros((n_e, width), dtype=np.int64)
        mask = np.zeros((n_e, width), dtype=bool)
        w0 = kg.adj_relations.shape[1]
        rels[:, :w0] = np.where(kg.adj_mask, kg.adj_relations, 0)
        ents[:, :w0] = np.where(kg.adj_mask, kg.adj_entities, 0)
        mask[:, :w0] = kg.adj_mask
        idx = np.arange(n_e)
        rels[idx, deg] = self.loop_id
        ents[idx, deg] = idx
        mask[idx, deg] = True
        origins = np.full((n_e, width), GRAPH, dtype=np.int64)
        origins[idx, deg] = SELF_LOOP
        self._g_rels, self._g_ents, self._g_mask, self._g_orig = rels, ents, mask, origins

    @property
    def completion_enabled(self) -> bool:
        return self.completion.enabled

    def reset(self, heads, query_rels, golds=None, anticipation=None) -> AgentState:
        heads = np.atleast_1d(np.asarray(heads, dtype=np.int64))
        query_rels = np.atleast_1d(np.asarray(query_rels, dtype=np.int64))
        golds = None if golds is None else np.atleast_1d(np.asarray(golds, dtype=np.int64))
        return AgentState(heads=heads, query_rels=query_rels, golds=golds, current=heads.copy(),
                          anticipation=anticipation)

    def graph_actions(self, current: np.ndarray):
        width = int(self.kg.degree[current].max(initial=0)) + 1
        return (self._g_rels[current, :width], self._g_ents[current, :width],
                self._g_mask[current, :width].copy(), self._g_orig[current, :width])

    def _gold_filter(self, state: AgentState, training: bool):
        if not (training and self.mask_gold_edge and state.golds is not None):
            return None
        return state.current == state.heads, state.query_rels, state.golds

    def build_action_space(self, state: AgentState, attention: np.ndarray | None = None,
                           training: bool = False) -> BatchActionSpace:
        """Graph actions + self-loop, plus completion proposals when enabled.

        During training the query's own edge (e_s, r_q, e_o) is removed while
        the agent stands on e_s, whether it comes from the graph or from completion.
        """
        rels, ents, mask, origins = self.graph_actions(state.current)
        forbid = self._gold_filter(state, training)
        if forbid is not None:
            at_head, qr, gold = forbid
            mask = mask & ~(at_head[:, None] & (rels == qr[:, None]) & (ents == gold[:, None]))
        att_col = np.full(rels.shape, -1, dtype=np.int64)
        if self.completion.enabled:
            if attention is None:
                raise ValueError("completion is enabled: relation attention required")
            n_actions = self.kg.degree[state.current] + 1
            c_rels, c_ents, c_mask, c_cols = propose_completions(
                attention, self.candidate_relations, state.current, n_actions,
                self.model, self.completion, self.kg, forbid)
            if c_rels.shape[1]:
                rels = np.concatenate([rels, c_rels], axis=1)
                ents = np.concatenate([ents, c_ents], axis=1)
                mask = np.concatenate([mask, c_mask], axis=1)
                origins = np.concatenate([origins, np.full(c_rels.shape, COMPLETION)], axis=1)
                att_col = np.concatenate([att_col, np.where(c_mask, c_cols, -1)], axis=1)
        return BatchActionSpace(rels, ents, mask, origins, att_col)

    def step(self, state: AgentState, space: BatchActionSpace, choice: np.ndarray,
             policy: PolicyNetwork | None = None) -> AgentState:
        choice = np.asarray(choice, dtype=np.int64)
        if state.t >= self.horizon:
            raise ValueError(f"episode already finished at t={state.t}")
        rows = np.arange(len(state))
        if np.any(choice < 0) or np.any(choice >= space.width) or not space.mask[rows, choice].all():
            raise ValueError("step: chosen action is outside the action space")
        rels = space.relations[rows, choice]
        ents = space.entities[rows, choice]
        history, lstm_state = state.history, state.lstm_state
        if policy is not None and lstm_state is not None:
            history, lstm_state = policy.update_history(lstm_state, rels, ents)
        return AgentState(
            heads=state.heads, query_rels=state.query_rels, golds=state.golds, current=ents,
            anticipation=state.anticipation, t=state.t + 1, history=history, lstm_state=lstm_state,
            path_rels=state.path_rels + [rels], path_ents=state.path_ents + [ents],
            path_origins=state.path_origins + [space.origins[rows, choice]],
        )

    def reward(self, state: AgentState, golds=None) -> np.ndarray:
        """1 for the gold tail, otherwise the KGE's squashed score of (e_s, r_q, e_T) (0 without shaping)."""
        golds = state.golds if golds is None else np.atleast_1d(golds)
        hit = state.current == golds
        r = hit.astype(np.float64)
        if self.reward_shaping and (~hit).any():
            miss = ~hit
            r[miss] = self.model.score(state.heads[miss], state.query_rels[miss], state.current[miss])
        return r
