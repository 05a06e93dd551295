"""Glue between the policy network and the environment: one decision per step, rollouts."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from dackgr.config import AnticipationConfig
from dackgr.env import AgentState, BatchActionSpace, Environment
from dackgr.kg import COMPLETION
from dackgr.kge import ScoreModel
from dackgr.nn import Tensor
from dackgr.nn import functional as F
from dackgr.policy import PolicyNetwork, anticipate, sample_categorical


@dataclass
class EpisodeTrace:
    head: int
    relation: int
    gold: int
    relations: list[int] = field(default_factory=list)
    entities: list[int] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    origins: list[int] = field(default_factory=list)
    terminal: int = -1
    reward: float = 0.0

    @property
    def dc_hits(self) -> list[bool]:
        return [o == COMPLETION for o in self.origins]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dc_hits"] = self.dc_hits
        return d


@dataclass
class Rollout:
    """A batch of finished episodes plus the differentiable terms the trainer needs."""

    state: AgentState
    log_prob_steps: list[Tensor]  # per step, (B,) log pi(a_t | s_t)
    attention_log_probs: list[Tensor]  # per step, (B,) log w_r for completion choices, else 0
    entropies: list[Tensor]  # per step, (B,)
    rewards: np.ndarray

    @property
    def origins(self) -> np.ndarray:
        return np.stack(self.state.path_origins, axis=1)

    def traces(self) -> list[EpisodeTrace]:
        st = self.state
        rels = np.stack(st.path_rels, axis=1)
        ents = np.stack(st.path_ents, axis=1)
        lps = np.stack([lp.data for lp in self.log_prob_steps], axis=1)
        origins = self.origins
        golds = st.golds if st.golds is not None else np.full(len(st), -1)
        return [
            EpisodeTrace(int(st.heads[i]), int(st.query_rels[i]), int(golds[i]), rels[i].tolist(),
                         ents[i].tolist(), lps[i].astype(float).tolist(), origins[i].tolist(),
                         int(st.current[i]), float(self.rewards[i]))
            for i in range(len(st))
        ]


class Agent:
    def __init__(self, policy: PolicyNetwork, env: Environment, model: ScoreModel | None = None,
                 anticipation: AnticipationConfig | None = None):
        self.policy = policy
        self.env = env
        self.model = model
        self.anticipation = anticipation or AnticipationConfig("off")
        if self.anticipation.enabled and model is None:
            raise ValueError("anticipation needs a score model")

    def anticipation_vectors(self, heads, rels, rng: np.random.Generator | None) -> np.ndarray | None:
        if not self.anticipation.enabled:
            return None
        return anticipate(self.model, heads, rels, self.anticipation.strategy, rng)

    def start(self, heads, rels, golds=None, rng: np.random.Generator | None = None) -> AgentState:
        e_p = self.anticipation_vectors(heads, rels, rng)
        state = self.env.reset(heads, rels, golds, e_p)
        state.history, state.lstm_state = self.policy.initial_history(state.heads)
        return state

    def decide(self, state: AgentState, training: bool = False) -> tuple[BatchActionSpace, Tensor, Tensor | None]:
        """Action space and masked log-probabilities for every row of ``state``."""
        s = self.policy.encode_state(state.query_rels, state.current, state.history, state.anticipation)
        att = None
        if self.env.completion_enabled:
            att = self.policy.relation_attention(s, self.env.candidate_relations)
        space = self.env.build_action_space(state, None if att is None else att.data, training=training)
        logp = self.policy.action_log_probs(s, space.relations, space.entities, space.mask)
        return space, logp, att

    def rollout(self, heads, rels, golds, rng: np.random.Generator, training: bool = True,
                action_dropout: float = 0.0) -> Rollout:
        state = self.start(heads, rels, golds, rng)
        steps, att_steps, entropies = [], [], []
        for _ in range(self.env.horizon):
            space, logp, att = self.decide(state, training=training)
            probs = np.exp(logp.data.astype(np.float64)) * space.mask
            if not np.isfinite(probs).all():
                raise FloatingPointError("non-finite action probabilities")
            sample_p = probs
            if training and action_dropout > 0:
                keep = rng.random(probs.shape) >= action_dropout
                dropped = probs * keep
                # never drop the whole space
                sample_p = np.where(dropped.sum(axis=1, keepdims=True) > 0, dropped, probs)
            choice = sample_categorical(sample_p, rng)
            rows = np.arange(len(choice))
            steps.append(F.gather(logp, choice[:, None], axis=1).reshape(-1))
            p_t = F.exp(logp) * space.mask
            entropies.append(F.mul(F.sum(p_t * logp, axis=1), -1.0))
            if att is not None and self.policy.cfg.attention_surrogate:
                cols = space.att_col[rows, choice]
                picked = cols >= 0
                gathered = F.gather(F.log(att), np.maximum(cols, 0)[:, None], axis=1).reshape(-1)
                att_steps.append(gathered * picked.astype(gathered.dtype))
            state = self.env.step(state, space, choice, self.policy)
        rewards = self.env.reward(state)
        return Rollout(state, steps, att_steps, entropies, rewards)


def rollout_batch(queries: np.ndarray, agent: Agent, n_rollouts: int, rng: np.random.Generator,
                  training: bool = True) -> list[EpisodeTrace]:
    """Roll out ``n_rollouts`` episodes per (head, relation, gold) query and return their traces."""
    queries = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    if n_rollouts == 0 or len(queries) == 0:
        return []
    rep = np.repeat(queries, n_rollouts, axis=0)
    return agent.rollout(rep[:, 0], rep[:, 1], rep[:, 2], rng, training=training).traces()
