"""REINFORCE training of the policy.

Loss per batch::

    -mean_b[(R_b - baseline) * sum_t log pi(a_t | s_t)] - entropy_weight * mean entropy

with no per-step discounting.  The KGE is frozen throughout.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from dackgr.agent import Agent, Rollout
from dackgr.config import TrainConfig
from dackgr.env import Environment
from dackgr.kg import COMPLETION, KnowledgeGraph
from dackgr.kge import ScoreModel
from dackgr.nn import Adam, backward
from dackgr.nn import functional as F
from dackgr.policy import PolicyNetwork

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class EpochReport:
    epoch: int
    mean_reward: float
    hit_rate: float
    dc_ratio: float
    completion_choices: int
    total_choices: int
    loss: float
    entropy_weight: float
    valid_mrr: float | None = None
    valid_hits1: float | None = None
    valid_hits3: float | None = None
    valid_hits10: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def build_agent(kg: KnowledgeGraph, model: ScoreModel | None, cfg: TrainConfig,
                policy: PolicyNetwork | None = None) -> Agent:
    """Fresh (or given) policy wired to an environment configured by ``cfg``."""
    ant_dim = model.entity_embeddings.shape[1] if (cfg.anticipation.enabled and model is not None) else 0
    if policy is None:
        policy = PolicyNetwork(kg.n_entities, kg.n_relations, cfg.policy, anticipation_dim=ant_dim,
                               rng=np.random.default_rng(cfg.seed))
    env = Environment(kg, model, cfg.completion, horizon=cfg.horizon, reward_shaping=cfg.reward_shaping,
                      mask_gold_edge=cfg.mask_gold_edge)
    return Agent(policy, env, model, cfg.anticipation)


def training_queries(kg: KnowledgeGraph, inverse: bool = False) -> np.ndarray:
    q = kg.train
    if inverse and len(q):
        inv = np.array([kg.vocab.inverse(r) for r in q[:, 1].tolist()], dtype=np.int64)
        q = np.concatenate([q, np.stack([q[:, 2], inv, q[:, 0]], axis=1)])
    return q


def dc_ratio(origins: np.ndarray) -> float:
    origins = np.asarray(origins)
    return float((origins == COMPLETION).sum() / origins.size) if origins.size else 0.0


def reinforce_loss(rollout: Rollout, advantage: np.ndarray, entropy_weight: float):
    """Surrogate whose gradient is the REINFORCE estimate (plus entropy bonus)."""
    logp = rollout.log_prob_steps[0]
    for lp in rollout.log_prob_steps[1:]:
        logp = logp + lp
    for lp in rollout.attention_log_probs:
        logp = logp + lp
    adv = advantage.astype(logp.dtype)
    loss = F.mul(F.mean(logp * adv), -1.0)
    if entropy_weight > 0:
        ent = rollout.entropies[0]
        for e in rollout.entropies[1:]:
            ent = ent + e
        loss = loss - F.mean(ent) * (entropy_weight / len(rollout.entropies))
    return loss


class Trainer:
    def __init__(self, kg: KnowledgeGraph, model: ScoreModel | None, cfg: TrainConfig,
                 agent: Agent | None = None):
        self.kg = kg
        self.model = model
        self.cfg = cfg
        self.agent = agent or build_agent(kg, model, cfg)
        self.policy = self.agent.policy
        self.optimizer = Adam(self.policy.parameters(), lr=cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)
        self.baseline = 0.0
        self.queries = training_queries(kg, cfg.inverse_queries)
        self.reports: list[EpochReport] = []
        self.best_state: dict | None = None
        self.best_key: tuple[float, float] | None = None
        self.best_epoch = 0

    def entropy_weight(self, epoch: int) -> float:
        w = self.cfg.entropy_weight
        if self.cfg.entropy_decay and self.cfg.epochs > 1:
            w *= 1.0 - (epoch - 1) / self.cfg.epochs
        return w

    def train_step(self, batch: np.ndarray, entropy_weight: float) -> tuple[Rollout, float]:
        cfg = self.cfg
        rep = np.repeat(batch, cfg.rollouts, axis=0)
        self.policy.train()
        try:
            rollout = self.agent.rollout(rep[:, 0], rep[:, 1], rep[:, 2], self.rng, training=True,
                                         action_dropout=cfg.policy.action_dropout)
        except FloatingPointError as exc:
            raise TrainingDivergedError(str(exc)) from exc
        rewards = rollout.rewards
        if cfg.baseline == "moving-average":
            advantage = rewards - self.baseline
            self.baseline = cfg.baseline_decay * self.baseline + (1 - cfg.baseline_decay) * float(rewards.mean())
        else:
            advantage = rewards
        loss = reinforce_loss(rollout, advantage, entropy_weight)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss {value} (mean reward {rewards.mean():.4f})")
        self.optimizer.zero_grad()
        backward(loss)
        self.optimizer.step()
        return rollout, value

    def train_epoch(self, epoch: int) -> EpochReport:
        cfg = self.cfg
        ent_w = self.entropy_weight(epoch)
        order = self.rng.permutation(len(self.queries))
        rewards, hits, losses, comp, total = [], [], [], 0, 0
        if cfg.rollouts > 0:
            for s in range(0, len(order), cfg.batch_size):
                batch = self.queries[order[s:s + cfg.batch_size]]
                rollout, loss = self.train_step(batch, ent_w)
                st = rollout.state
                rewards.append(rollout.rewards)
                hits.append(st.current == st.golds)
                losses.append(loss)
                origins = rollout.origins
                comp += int((origins == COMPLETION).sum())
                total += int(origins.size)
        r = np.concatenate(rewards) if rewards else np.zeros(0)
        h = np.concatenate(hits) if hits else np.zeros(0)
        return EpochReport(
            epoch=epoch,
            mean_reward=float(r.mean()) if r.size else 0.0,
            hit_rate=float(h.mean()) if h.size else 0.0,
            dc_ratio=comp / total if total else 0.0,
            completion_choices=comp,
            total_choices=total,
            loss=float(np.mean(losses)) if losses else 0.0,
            entropy_weight=ent_w,
        )

    def fit(self, on_epoch: Callable[[EpochReport], None] | None = None) -> list[EpochReport]:
        """Train for ``cfg.epochs``; keep the weights with the best valid Hits@10 (then MRR, then latest)."""
        from dackgr.evaluator import evaluate

        cfg = self.cfg
        for epoch in range(1, cfg.epochs + 1):
            report = self.train_epoch(epoch)
            if len(self.kg.valid) and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                res = evaluate(self.agent, self.kg, "valid", beam_width=cfg.beam_width, seed=cfg.seed)
                report.valid_mrr, report.valid_hits1 = res.mrr, res.hits1
                report.valid_hits3, report.valid_hits10 = res.hits3, res.hits10
                key = (res.hits10, res.mrr)
                # ties go to the later epoch
                if self.best_key is None or key >= self.best_key:
                    self.best_key, self.best_state, self.best_epoch = key, self.policy.state_dict(), epoch
            self.reports.append(report)
            logger.info("epoch %d: reward %.3f hit %.3f dc %.3f loss %.4f valid_hits10 %s", epoch,
                        report.mean_reward, report.hit_rate, report.dc_ratio, report.loss, report.valid_hits10)
            if on_epoch:
                on_epoch(report)
        if self.best_state is not None:
            self.policy.load_state_dict(self.best_state)
        return self.reports


def train(kg: KnowledgeGraph, model: ScoreModel | None, cfg: TrainConfig, policy: PolicyNetwork | None = None,
          on_epoch: Callable[[EpochReport], None] | None = None) -> tuple[Agent, list[EpochReport]]:
    agent = build_agent(kg, model, cfg, policy)
    trainer = Trainer(kg, model, cfg, agent)
    reports = trainer.fit(on_epoch)
    return agent, reports


def write_reports(path, reports: list[EpochReport]) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in reports))


def read_reports(path) -> list[EpochReport]:
    lines = Path(path).read_text().splitlines()
    return [EpochReport(**json.loads(line)) for line in lines if line.strip()]
