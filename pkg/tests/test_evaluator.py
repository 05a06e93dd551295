import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dackgr.agent import Agent, EpisodeTrace
from dackgr.config import TrainConfig
from dackgr.evaluator import (
    BeamEntry,
    beam_search,
    dc_hits_analysis,
    dc_hits_ratio,
    entity_scores,
    evaluate,
    format_path,
    write_csv,
    write_metrics,
    write_paths,
    write_ranks,
)
from dackgr.kg import COMPLETION, GRAPH, SELF_LOOP, build_graph
from dackgr.kge import KGEConfig, train_kge
from dackgr.nn import Tensor, no_grad
from dackgr.nn import functional as F
from dackgr.ranking import RankingResult, filtered_rank, rank_reached
from dackgr.trainer import EpochReport, build_agent

TINY_POLICY = {"dim": 6, "hidden": 5, "layers": 1, "mlp_hidden": 7, "dtype": "float64"}


def toy_kg(seed=0, n_ent=5, n_rel=2, n_facts=8, n_test=3):
    rng = np.random.default_rng(seed)
    facts = set()
    while len(facts) < n_facts + n_test:
        h, t = rng.choice(n_ent, size=2, replace=False)
        facts.add((f"e{h}", f"r{rng.integers(n_rel)}", f"e{t}"))
    facts = sorted(facts)
    order = rng.permutation(len(facts))
    train = [facts[i] for i in order[:n_facts]]
    test = [facts[i] for i in order[n_facts:]]
    # keep every test entity and relation known to the vocabulary through train
    known = {x for h, _, t in train for x in (h, t)} | {f"e{i}" for i in range(n_ent)}
    return build_graph(train + [(e, "r0", e) for e in sorted(known - {x for h, _, t in train for x in (h, t)})],
                       test=test)


def toy_agent(kg, seed=0, horizon=2, model=None, alpha=0.0, anticipation="off"):
    cfg = TrainConfig.from_dict({"horizon": horizon, "seed": seed, "policy": TINY_POLICY,
                                 "anticipation": {"strategy": anticipation},
                                 "completion": {"alpha": alpha, "max_actions": 3, "k": 2}})
    return build_agent(kg, model, cfg)


def enumerate_paths(agent: Agent, head, rel, rng_seed=0):
    """Every fixed-length path with its summed log-probability, one row at a time."""
    env = agent.env
    out = []

    def walk(state, score):
        if state.t == env.horizon:
            ents = [int(state.heads[0])] + [int(e[0]) for e in state.path_ents]
            out.append((ents, [int(r[0]) for r in state.path_rels], score))
            return
        space, logp, _ = agent.decide(state, training=False)
        for a in np.flatnonzero(space.mask[0]):
            walk(env.step(state, space, np.array([a]), agent.policy), score + float(logp.data[0, a]))

    with no_grad():
        walk(agent.start([head], [rel], None, np.random.default_rng(rng_seed)), 0.0)
    return out


def _sorted(paths):
    # descending score; on exact ties the oracle is order-agnostic, so sort by path too
    return sorted(paths, key=lambda p: (-p[2], p[0], p[1]))


def assert_same_paths(got, expected):
    """Same paths, scores equal up to batched-vs-single-row float rounding."""
    exp = {(tuple(e), tuple(r)): s for e, r, s in expected}
    seen = {(tuple(e), tuple(r)): s for e, r, s in got}
    assert len(seen) == len(got) == len(expected)
    assert seen.keys() == exp.keys()
    for key, s in seen.items():
        assert s == pytest.approx(exp[key], rel=1e-12, abs=1e-12)


class TestRanking:
    def test_filtered_rank_hand(self):
        scores = np.array([0.1, 0.9, 0.5, 0.9, 0.3])
        assert filtered_rank(scores, 3) == 2  # id 1 ties and has the lower id
        assert filtered_rank(scores, 3, known=[1]) == 1
        assert filtered_rank(scores, 3, known=[3]) == 2  # gold never filtered

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=2, max_size=12), st.data())
    def test_filtered_not_above_unfiltered(self, raw, data):
        scores = np.array(raw, dtype=float)
        gold = data.draw(st.integers(0, len(scores) - 1))
        known = data.draw(st.lists(st.integers(0, len(scores) - 1), max_size=5))
        assert filtered_rank(scores, gold, known) <= filtered_rank(scores, gold)

    def test_rank_reached_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n = int(rng.integers(2, 15))
            reached = {int(e): float(rng.integers(0, 4)) for e in rng.choice(n, size=rng.integers(0, n + 1), replace=False)}
            gold = int(rng.integers(n))
            known = set(rng.choice(n, size=rng.integers(0, 3)).tolist())
            # oracle: average filtered rank over every ordering of the unreached block
            cands = [e for e in range(n) if e == gold or e not in known]
            reached_c = [e for e in cands if e in reached]
            unreached_c = [e for e in cands if e not in reached]
            ordered = sorted(reached_c, key=lambda e: (-reached[e], e))
            if gold in reached:
                expected = ordered.index(gold) + 1
            else:
                expected = np.mean([len(ordered) + p.index(gold) + 1 for p in itertools.permutations(unreached_c)]) \
                    if len(unreached_c) <= 6 else len(ordered) + (len(unreached_c) + 1) / 2
            assert rank_reached(reached, gold, n, known) == pytest.approx(expected, abs=0)

    def test_metrics_brute_force(self):
        rng = np.random.default_rng(7)
        ranks = rng.integers(1, 40, size=50).astype(float)
        res = RankingResult.from_ranks(ranks)
        assert res.mrr == sum(1 / r for r in ranks) / 50
        for k, got in ((1, res.hits1), (3, res.hits3), (10, res.hits10)):
            assert got == sum(1 for r in ranks if r <= k) / 50
            assert res.hits(k) == got
        assert res.hits1 <= res.hits3 <= res.hits10 and res.mrr >= res.hits1

    def test_bad_ranks(self):
        with pytest.raises(ValueError):
            RankingResult.from_ranks([0.5])
        assert RankingResult.from_ranks([]).metrics()["count"] == 0


class TestBeamSearch:
    @pytest.mark.parametrize("seed", range(4))
    def test_exhaustive_width_equals_enumeration(self, seed):
        kg = toy_kg(seed)
        agent = toy_agent(kg, seed=seed, horizon=3)
        h, r, _ = kg.test[0].tolist()
        paths = enumerate_paths(agent, h, r)
        beams = beam_search(agent, h, r, beam_width=len(paths) + 5)
        got = [(b.entities, b.relations, b.log_prob) for b in beams]
        assert_same_paths(got, paths)
        # beam output is already in descending score order
        assert [b.log_prob for b in beams] == sorted((b.log_prob for b in beams), reverse=True)

    def test_top3_matches_enumeration(self):
        kg = toy_kg(11)
        agent = toy_agent(kg, seed=1, horizon=2)
        h, r, _ = kg.test[0].tolist()
        paths = _sorted(enumerate_paths(agent, h, r))
        beams = beam_search(agent, h, r, beam_width=len(paths))
        assert [(b.entities, b.relations) for b in beams[:3]] == [(p[0], p[1]) for p in paths[:3]]

    def test_with_completion_matches_enumeration(self):
        kg = toy_kg(5, n_ent=6, n_facts=10)
        model, _ = train_kge(kg, cfg=KGEConfig(kind="distmult", dim=8, epochs=3, eval_every=100, dtype="float64"))
        agent = toy_agent(kg, seed=2, horizon=2, model=model, alpha=0.5, anticipation="top-one")
        h, r, _ = kg.test[0].tolist()
        paths = enumerate_paths(agent, h, r)
        beams = beam_search(agent, h, r, beam_width=len(paths))
        assert_same_paths([(b.entities, b.relations, b.log_prob) for b in beams], paths)

    def test_width_one_is_greedy(self):
        kg = toy_kg(2)
        agent = toy_agent(kg, seed=3, horizon=3)
        h, r, _ = kg.test[0].tolist()
        state = agent.start([h], [r], None, np.random.default_rng(0))
        score = 0.0
        with no_grad():
            for _ in range(3):
                space, logp, _ = agent.decide(state)
                lp = np.where(space.mask, logp.data, -np.inf)[0]
                a = int(np.argmax(lp))
                score += lp[a]
                state = agent.env.step(state, space, np.array([a]), agent.policy)
        (beam,) = beam_search(agent, h, r, beam_width=1)
        assert beam.entities[1:] == [int(e[0]) for e in state.path_ents]
        assert beam.log_prob == pytest.approx(score, abs=1e-12)

    def test_log_prob_non_increasing_along_extensions(self):
        kg = toy_kg(4)
        agent = toy_agent(kg, horizon=3)
        h, r, _ = kg.test[0].tolist()
        for t in (1, 2, 3):
            agent.env.horizon = t
            for b in beam_search(agent, h, r, beam_width=50):
                assert len(b.relations) == t and b.log_prob <= 0

    def test_bad_width(self):
        kg = toy_kg(0)
        with pytest.raises(ValueError):
            beam_search(toy_agent(kg), 0, 0, beam_width=0)

    def test_entity_scores_keep_max(self):
        beams = [BeamEntry([0, 1], [0], -2.0), BeamEntry([0, 1], [1], -0.5), BeamEntry([0, 2], [0], -1.0)]
        assert entity_scores(beams) == {1: -0.5, 2: -1.0}


class _OraclePolicyAgent(Agent):
    """Puts almost all mass on actions that land on a known answer of the query."""

    def __init__(self, base: Agent, kg):
        super().__init__(base.policy, base.env, base.model, base.anticipation)
        self.kg = kg

    def decide(self, state, training=False):
        space, logp, att = super().decide(state, training)
        good = np.array([[e in self.kg.filter_candidates(int(h), int(r)) for e in row]
                         for h, r, row in zip(state.heads, state.query_rels, space.entities)])
        stay = space.relations == self.env.loop_id
        pref = np.where(good & ((state.t == 0) | stay), 0.0, -20.0)
        return space, F.log_softmax(Tensor(pref), mask=space.mask), att


class TestEvaluate:
    def test_perfect_policy_mrr_one(self):
        train = [("a", "r", "b"), ("c", "r", "d"), ("e", "s", "a"), ("b", "s", "c")]
        kg = build_graph(train, test=[("a", "r", "b"), ("c", "r", "d")])
        agent = _OraclePolicyAgent(toy_agent(kg, horizon=2), kg)
        res = evaluate(agent, kg, "test", beam_width=8)
        assert res.mrr == 1.0 and res.hits1 == 1.0

    def test_metrics_equal_brute_force(self):
        kg = toy_kg(9, n_ent=8, n_facts=14, n_test=6)
        agent = toy_agent(kg, horizon=2)
        res, beams = evaluate(agent, kg, "test", beam_width=4, keep_beams=True)
        ranks = []
        for (h, r, t), bs in zip(kg.test.tolist(), beams):
            best = {}
            for b in bs:
                best[b.entities[-1]] = max(best.get(b.entities[-1], -np.inf), b.log_prob)
            known = kg.filter_candidates(h, r) - {t}
            cands = [e for e in range(kg.n_entities) if e not in known]
            reached = sorted((e for e in cands if e in best), key=lambda e: (-best[e], e))
            ranks.append(reached.index(t) + 1 if t in reached else len(reached) + (len(cands) - len(reached) + 1) / 2)
        assert res.ranks == ranks
        assert res.mrr == np.mean([1 / r for r in ranks])

    def test_deterministic(self):
        kg = toy_kg(1)
        agent = toy_agent(kg)
        assert evaluate(agent, kg, "test", 4, seed=3).ranks == evaluate(agent, kg, "test", 4, seed=3).ranks


class TestOutputs:
    def test_format_path(self):
        kg = build_graph([("x", "r", "y"), ("y", "s", "z")])
        v = kg.vocab
        beam = BeamEntry([0, 1, 2], [v.relation_id("r"), v.relation_id("s")], -0.3, [GRAPH, COMPLETION])
        assert format_path(beam, v, gold=2) == "x --r--> y --*s*--> _z_"
        assert format_path(beam, v) == "x --r--> y --*s*--> z"

    def test_writers(self, tmp_path):
        kg = build_graph([("x", "r", "y")], test=[("x", "r", "y")])
        res = RankingResult.from_ranks([2.0])
        write_metrics(tmp_path / "m.json", res, {"split": "test"})
        assert '"mrr": 0.5' in (tmp_path / "m.json").read_text()
        write_ranks(tmp_path / "r.csv", kg.test, res, kg.vocab)
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows == [["head", "relation", "tail", "rank"], ["x", "r", "y", "2.0"]]
        beams = [[BeamEntry([0, 1], [0], -0.1, [GRAPH]), BeamEntry([0, 0], [kg.vocab.loop_id], -2.0, [SELF_LOOP])]]
        write_paths(tmp_path / "p.txt", kg.test, beams, kg.vocab, top=1)
        text = (tmp_path / "p.txt").read_text()
        assert "x --r--> _y_" in text and "LOOP" not in text


def _trace(n_steps, completion_steps):
    origins = [COMPLETION if i in completion_steps else GRAPH for i in range(n_steps)]
    return EpisodeTrace(0, 0, 1, [0] * n_steps, [1] * n_steps, [0.0] * n_steps, origins, 1, 1.0)


class TestDCHits:
    def test_all_graph_is_zero(self):
        assert dc_hits_ratio([_trace(3, ()) for _ in range(5)]) == 0.0

    def test_hand_count(self):
        traces = [_trace(3, ()) for _ in range(10)]
        traces[0] = _trace(3, (0, 2))
        traces[7] = _trace(3, (1,))
        assert dc_hits_ratio(traces) == 3 / 30

    def _reports(self, ratios):
        return [EpochReport(i + 1, 0.0, 0.0, r, int(r * 100), 100, 0.0, 0.0) for i, r in enumerate(ratios)]

    def test_tables(self, tmp_path):
        runs = [{"name": "lo", "alpha": 0.2, "reports": self._reports([0.5, 0.1, 0.1, 0.1, 0.1, 0.1])},
                {"name": "hi", "alpha": 0.5, "reports": self._reports([0.0, 0.3, 0.3, 0.3, 0.3, 0.4])}]
        by_epoch, by_alpha = dc_hits_analysis(runs)
        assert len(by_epoch) == 12
        assert [row["alpha"] for row in by_alpha] == [0.2, 0.5]
        assert by_alpha[0]["dc_ratio"] == pytest.approx(0.1)
        assert by_alpha[1]["dc_ratio"] == pytest.approx(0.32)
        write_csv(tmp_path / "a.csv", by_alpha)
        assert (tmp_path / "a.csv").read_text().splitlines()[0] == "alpha,dc_ratio,runs"

    def test_missing_logs(self):
        with pytest.raises(ValueError):
            dc_hits_analysis([])
        with pytest.raises(ValueError):
            dc_hits_analysis([{"name": "x", "alpha": 0.2, "reports": []}])
