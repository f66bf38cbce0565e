import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coattn.dataset import AdSample, SynthSpec, generate_synthetic, make_splits
from coattn.errors import EvaluationError, MetricError, ValidationError
from coattn.evaluator import (
    BASELINE_NOTE,
    POOL_SIZE,
    VARIANT_ORDER,
    RankingResult,
    Ranker,
    build_candidate_pool,
    evaluate,
    expected_random_top_rank,
    format_table,
    image_rng,
    mean_rank,
    median,
    rank_by_scores,
    rank_statements,
    ranking_report,
    run_benchmark,
    top_rank_bounds,
)
from coattn.trainer import TrainConfig


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic(SynthSpec(images=120, proposals=5, d1=6, d2=8, seed=11))


def _monte_carlo_top_rank(trials, rng, pool=50, related=3):
    """Expected best rank of `related` items in a uniformly random permutation."""
    tops = [min(rng.permutation(pool)[:related]) + 1 for _ in range(trials)]
    return float(np.mean(tops))


class TestCandidatePool:
    def test_size_and_related(self, corpus):
        for s in corpus.samples[:20]:
            pool = build_candidate_pool(s, corpus, image_rng(0, s.image_id))
            assert len(pool) == POOL_SIZE == len(set(pool))
            assert set(s.related_statement_ids) <= set(pool)
            assert pool == sorted(pool)

    def test_deterministic(self, corpus):
        s = corpus.samples[7]
        a = build_candidate_pool(s, corpus, image_rng(3, s.image_id))
        b = build_candidate_pool(s, corpus, image_rng(3, s.image_id))
        c = build_candidate_pool(s, corpus, image_rng(4, s.image_id))
        assert a == b and a != c

    def _one_topic(self, n_distractors):
        statements = {i: ["w"] for i in range(3 + n_distractors)}
        sample = AdSample("x", 0, np.ones((1, 4)), np.ones((1, 2)), np.ones(1), [0, 1, 2])
        from coattn.dataset import DatasetManifest

        others = {i: ["w"] for i in range(1000, 1100)}
        return sample, DatasetManifest(
            "v", 1, 2, [0], ["s"], np.ones((1, 1)), {**statements, **others},
            {0: sorted(statements), 1: sorted(others)}, [sample],
        )

    def test_exact_fit_no_backfill(self, caplog):
        sample, m = self._one_topic(47)
        with caplog.at_level(logging.WARNING, logger="coattn"):
            pool = build_candidate_pool(sample, m, np.random.default_rng(0))
        assert pool == list(range(50))
        assert "backfill" not in caplog.text

    def test_backfill_warns(self, caplog):
        sample, m = self._one_topic(40)
        with caplog.at_level(logging.WARNING, logger="coattn"):
            pool = build_candidate_pool(sample, m, np.random.default_rng(0))
        assert len(pool) == 50 and len([i for i in pool if i >= 1000]) == 7
        assert "backfilling 7" in caplog.text

    def test_underflow(self):
        sample, m = self._one_topic(40)
        with pytest.raises(EvaluationError):
            build_candidate_pool(sample, m, np.random.default_rng(0), size=200)

    def test_strict_related_count(self):
        sample, m = self._one_topic(47)
        sample.related_statement_ids = [0, 1]
        with pytest.raises(EvaluationError):
            build_candidate_pool(sample, m, np.random.default_rng(0), strict=True)


class TestRanking:
    def test_unique_best_related(self):
        r = rank_by_scores("a", {1: 0.1, 2: 0.9, 3: 0.5}, [2])
        assert r.top_rank == 1

    def test_top_rank_is_min(self):
        scores = {i: -float(i) for i in range(1, 51)}
        r = rank_by_scores("a", scores, [5, 12, 30])
        assert [r.ranks[i] for i in (5, 12, 30)] == [5, 12, 30]
        assert r.top_rank == 5

    def test_ties_by_id(self):
        ids = list(range(100, 150))
        r = rank_by_scores("a", {i: 0.3 for i in reversed(ids)}, [149])
        assert r.ranked_ids == ids and r.top_rank == 50

    @given(st.permutations(list(range(50))), st.integers(0, 1000))
    @settings(max_examples=50)
    def test_pool_order_invariance(self, order, seed):
        rng = np.random.default_rng(seed)
        values = np.round(rng.uniform(-1, 1, 50), 1)  # coarse values force ties
        table = dict(zip(range(50), values))
        sample = AdSample("a", 0, np.ones((1, 4)), np.ones((1, 2)), np.ones(1), [3, 17, 40])

        def scorer(_, ids):
            return np.array([table[i] for i in ids])

        base = rank_statements(sample, list(range(50)), scorer)
        shuffled = rank_statements(sample, list(order), scorer)
        assert base.ranks == shuffled.ranks
        assert sorted(base.ranks.values()) == list(range(1, 51))

    def test_scoring_error_carries_image(self):
        from coattn.errors import DegenerateVectorError

        def scorer(_, ids):
            raise DegenerateVectorError("zero norm")

        sample = AdSample("img-9", 0, np.ones((1, 4)), np.ones((1, 2)), np.ones(1), [0])
        with pytest.raises(EvaluationError, match="img-9"):
            rank_statements(sample, [0, 1], scorer)


class TestMeanRank:
    def _result(self, top):
        return RankingResult("a", [], {}, {0: top}, [0])

    def test_singleton(self):
        assert mean_rank([self._result(7)]) == 7.0

    def test_arithmetic(self):
        assert mean_rank([self._result(1), self._result(3)]) == 2.0

    def test_empty(self):
        with pytest.raises(MetricError):
            mean_rank([])

    def test_order_statistic_oracle(self):
        # E[min of 3 uniform ranks among 50] = sum_k P(min >= k) = sum_k C(51-k, 3) / C(50, 3)
        from math import comb

        exact = sum(comb(51 - k, 3) for k in range(1, 49)) / comb(50, 3)
        assert exact == pytest.approx(expected_random_top_rank(), abs=1e-12) == 12.75
        assert _monte_carlo_top_rank(20_000, np.random.default_rng(0)) == pytest.approx(12.75, abs=0.15)

    def test_random_scorer_calibrated(self, corpus):
        rng = np.random.default_rng(2)

        def random_scorer(_, ids):
            return rng.standard_normal(len(ids))

        ranks = [mean_rank(evaluate(random_scorer, corpus, eval_seed=s)) for s in range(20)]
        # sd of a 120-image mean is about 1.0; the 20-run mean is within ~0.25 of 12.75
        assert np.mean(ranks) == pytest.approx(expected_random_top_rank(), abs=0.8)

    def test_bounds(self, corpus):
        lo, hi = top_rank_bounds()
        assert (lo, hi) == (1, 48)

        def worst(sample, ids):
            return np.array([-1.0 if i in sample.related_statement_ids else 1.0 for i in ids])

        assert mean_rank(evaluate(worst, corpus, eval_seed=0)) == 48.0

    def test_median(self):
        assert median([3.0, 1.0, 2.0, 10.0]) == 2.5


class TestEvaluate:
    def test_unknown_image(self, corpus):
        with pytest.raises(ValidationError):
            evaluate(lambda s, ids: np.zeros(len(ids)), corpus, ["nope"])

    def test_checkpoint_report_reproducible(self, small_checkpoint, small_manifest):
        reports = [
            json.dumps(ranking_report(evaluate(Ranker(small_checkpoint, small_manifest), small_manifest, eval_seed=3)))
            for _ in range(2)
        ]
        assert reports[0] == reports[1]
        doc = json.loads(reports[0])
        assert 1 <= doc["mean_rank"] <= 48 and doc["n_images"] == len(small_manifest.samples)


class TestBenchmark:
    def test_grid_layout_and_reproducibility(self, corpus):
        cfg = TrainConfig(epochs=1, d_w=6, d_e=6, seed=2)
        plan = make_splits(corpus, 2)
        a = run_benchmark(corpus, plan, VARIANT_ORDER, cfg)
        b = run_benchmark(corpus, plan, VARIANT_ORDER, cfg)
        assert json.dumps(a) == json.dumps(b)
        assert list(a["variants"]) == VARIANT_ORDER and len(VARIANT_ORDER) == 7
        flags = {v: (e["proposals"], e["attention"], e["co_attention"]) for v, e in a["variants"].items()}
        assert flags["VSE"] == (False, False, False)
        assert flags["VSE-P"] == (True, False, False)
        assert flags["VSE-P-Att"] == (True, True, False)
        assert flags["VSE-CoAtt-2"] == (True, True, True)
        for entry in a["variants"].values():
            assert [f["fold"] for f in entry["folds"]] == [0, 1, 2, 3, 4]
            assert all(1 <= f["mean_rank"] <= 48 and f["seed"] == 2 and len(f["config_hash"]) == 16 for f in entry["folds"])
            ranks = [f["mean_rank"] for f in entry["folds"]]
            assert entry["aggregate"]["mean"] == pytest.approx(np.mean(ranks))
            assert entry["aggregate"]["sd"] == pytest.approx(np.std(ranks, ddof=1))
        assert a["note"] == BASELINE_NOTE
        table = format_table(a).splitlines()
        assert table[0].split()[:2] == ["METHOD", "Box"] and len(table) == 9
        assert [line.split()[0] for line in table[2:]] == VARIANT_ORDER

    def test_fold_failure_recorded(self, corpus, monkeypatch):
        import coattn.evaluator as ev
        from coattn.errors import TrainingError

        real = ev.train

        def flaky(manifest, config, train_ids=None, **kw):
            if config.variant == "VSE-P":
                raise TrainingError("diverged")
            return real(manifest, config, train_ids=train_ids, **kw)

        monkeypatch.setattr(ev, "train", flaky)
        seen = []
        report = run_benchmark(corpus, make_splits(corpus, 0), ["VSE-P", "VSE"], TrainConfig(epochs=1, d_w=6, d_e=6),
                               on_fold=lambda v, o: seen.append((v, o["fold"])))
        assert report["variants"]["VSE-P"]["aggregate"] is None
        assert all("diverged" in f["error"] for f in report["variants"]["VSE-P"]["folds"])
        assert report["variants"]["VSE"]["aggregate"]["n_folds"] == 5
        assert len(seen) == 10
        assert "failed" in format_table(report)

    def test_unknown_variant(self, corpus):
        with pytest.raises(ValidationError):
            run_benchmark(corpus, make_splits(corpus, 0), ["VSE-Q"], TrainConfig())
