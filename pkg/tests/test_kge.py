import numpy as np
import pytest

from dackgr.kg import build_graph
from dackgr.kge import KGEConfig, KGEModel, ScoreModel, _conv_grid, _transe_loss, evaluate_kge, train_kge
from dackgr.nn import backward
from dackgr.nn import functional as F
from dackgr.nn.gradcheck import numeric_gradient, relative_error

TOL = 1e-4
CHAIN = [(f"n{i}", "next", f"n{i + 1}") for i in range(9)] + [(f"n{i}", "even", f"n{i + 2}") for i in range(0, 8, 2)]


def param_gradcheck(module, loss_fn, eps=1e-6):
    """Relative error per parameter between backward() and central differences of ``loss_fn``."""
    module.zero_grad()
    backward(loss_fn())
    named = list(module.named_parameters())
    analytic = [p.grad.copy() for _, p in named]
    numeric = numeric_gradient(lambda _: float(loss_fn().data), [p.data for _, p in named], eps)
    return {name: _error(a, n) for (name, _), a, n in zip(named, analytic, numeric)}


def _error(analytic, numeric):
    # a bias feeding straight into batch norm has an exactly-zero true gradient;
    # there only the absolute difference is meaningful
    if max(np.linalg.norm(analytic), np.linalg.norm(numeric)) < 1e-6:
        return float(np.linalg.norm(analytic - numeric))
    return relative_error(analytic, numeric)


def tiny(kind, **kw):
    cfg = KGEConfig(kind=kind, dim=8, filters=2, kernel=2, input_dropout=0, feature_dropout=0, hidden_dropout=0,
                    dtype="float64", **kw)
    return KGEModel(kind, 6, 5, cfg, rng=np.random.default_rng(1))


class TestConfig:
    def test_round_trip(self):
        cfg = KGEConfig(kind="transe", dim=16)
        assert KGEConfig.from_dict(cfg.to_dict()) == cfg

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            KGEConfig(kind="rotate")

    @pytest.mark.parametrize("dim,grid", [(200, (10, 20)), (32, (4, 8)), (8, (2, 4)), (100, (5, 20))])
    def test_conv_grid(self, dim, grid):
        assert _conv_grid(dim) == grid


class TestCompositeGradients:
    @pytest.mark.parametrize("kind", ["conve", "distmult"])
    def test_bce_1n(self, kind):
        model = tiny(kind)
        heads, rels = np.array([0, 3, 5]), np.array([1, 4, 2])
        labels = np.zeros((3, 6))
        labels[[0, 1, 2], [2, 0, 5]] = 1.0
        labels = 0.9 * labels + 0.1 / 6
        errs = param_gradcheck(model, lambda: F.bce_with_logits(model.scores_1n(heads, rels), labels))
        assert max(errs.values()) < TOL, errs

    def test_transe_margin(self):
        model = tiny("transe", negatives=3, margin=2.0)
        pairs = np.array([[0, 1], [2, 3]])
        tails = [np.array([4]), np.array([1, 5])]

        def loss():
            return _transe_loss(model, pairs, tails, np.arange(2), np.random.default_rng(0), model.cfg)

        errs = param_gradcheck(model, loss)
        assert max(errs.values()) < TOL, errs

    @pytest.mark.parametrize("kind", ["conve", "distmult", "transe"])
    def test_triple_scores_match_1n(self, kind):
        model = tiny(kind).eval()
        h, r = np.array([0, 1, 2]), np.array([3, 0, 4])
        full = model.scores_1n(h, r).data
        for t in range(6):
            np.testing.assert_allclose(model.triple_scores(h, r, np.full(3, t)).data, full[:, t], rtol=1e-10, atol=1e-10)
        sub = model.scores_1n(h, r, entities=np.array([4, 1])).data
        np.testing.assert_allclose(sub, full[:, [4, 1]], rtol=1e-10, atol=1e-10)


@pytest.fixture(scope="module")
def chain_kg():
    return build_graph(CHAIN, valid=[("n0", "next", "n1")])


class TestTraining:
    @pytest.mark.parametrize("kind", ["conve", "distmult", "transe"])
    def test_learns_chain(self, chain_kg, kind):
        cfg = KGEConfig(kind=kind, dim=16, epochs=120, lr=0.01, batch_size=16, eval_every=200, filters=4)
        model, hist = train_kge(chain_kg, cfg=cfg)
        assert hist[-1]["loss"] < hist[0]["loss"]
        # true tails outrank the median entity for most training facts
        s = model.raw_scores(chain_kg.train[:, 0], chain_kg.train[:, 1])
        true = s[np.arange(len(s)), chain_kg.train[:, 2]]
        assert np.mean(true > np.median(s, axis=1)) >= 0.8

    def test_deterministic(self, chain_kg):
        cfg = KGEConfig(kind="conve", dim=8, epochs=3, filters=2, eval_every=1)
        a, ha = train_kge(chain_kg, cfg=cfg)
        b, hb = train_kge(chain_kg, cfg=cfg)
        assert ha == hb
        for k, v in a.model.state_dict().items():
            assert np.array_equal(v, b.model.state_dict()[k])

    def test_empty_graph(self):
        kg = build_graph([], test=[("a", "r", "b")])
        model, hist = train_kge(kg, cfg=KGEConfig(kind="distmult", dim=4, epochs=2))
        assert hist == [] and model.n_entities == 2

    def test_best_valid_kept(self, chain_kg):
        cfg = KGEConfig(kind="distmult", dim=8, epochs=10, eval_every=1, patience=100, lr=0.05)
        model, hist = train_kge(chain_kg, cfg=cfg)
        best = max(h["valid_mrr"] for h in hist)
        assert evaluate_kge(model, chain_kg, "valid").mrr == pytest.approx(best)


@pytest.fixture(scope="module")
def model():
    kg = build_graph(CHAIN)
    return ScoreModel(train_kge(kg, cfg=KGEConfig(kind="conve", dim=8, epochs=2, filters=2))[0].model)


class TestScoreModel:
    def test_distribution(self, model):
        p = model.tail_distribution([0, 1], [0, 1])
        np.testing.assert_allclose(p.sum(axis=1), 1.0)
        assert (p > 0).all()

    def test_score_range(self, model):
        s = model.score([0, 1, 2], [0, 0, 1], [1, 2, 3])
        assert ((s > 0) & (s < 1)).all()

    def test_top_k_ties_by_id(self, model):
        p = model.tail_distribution([3], [1])[0]
        top = model.top_k_tails(3, 1, 4)
        ids = [e for e, _ in top]
        assert ids == sorted(range(len(p)), key=lambda e: (-p[e], e))[:4]
        assert [round(x, 12) for _, x in top] == sorted((round(x, 12) for _, x in top), reverse=True)

    def test_top_k_table_matches_single(self, model):
        heads, rels = np.array([0, 3, 0, 5]), np.array([1, 0, 1, 2])
        table = model.top_k_table(heads, rels, 3)
        for row, (h, r) in enumerate(zip(heads, rels)):
            assert table[row].tolist() == [e for e, _ in model.top_k_tails(int(h), int(r), 3)]

    def test_save_load(self, model, tmp_path):
        model.save(tmp_path / "kge")
        again = ScoreModel.load(tmp_path / "kge")
        np.testing.assert_array_equal(again.raw_scores([0, 2], [1, 3]), model.raw_scores([0, 2], [1, 3]))
