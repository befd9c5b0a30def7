import math

import numpy as np
import pytest

from tapas.model import LabelEmbeddingTable, candidate_logits
from tapas.numerics import Rng
from tapas.sampler import CandidateSet, build_squashed
from tapas.two_pass import (
    TapasConfig,
    adaptive_pass,
    candidate_scores,
    temperature_at,
    two_pass_sample,
)


def _toy_emb():
    return LabelEmbeddingTable(
        table=np.array([[2.0, 0.0], [1.0, 0.0], [0.0, 5.0], [-1.0, 0.0]])
    )


def _random_dist(v, seed):
    gen = np.random.default_rng(seed)
    freqs = gen.dirichlet(np.ones(v))
    return build_squashed(freqs)


class TestTapasConfig:
    def test_defaults(self):
        cfg = TapasConfig(n=16)
        assert cfg.r == 1 and cfg.tau0 == 1.0 and cfg.tau_decay == 1.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(n=0),
            dict(n=4, r=0),
            dict(n=4, tau0=0.0),
            dict(n=4, tau_decay=0.0),
            dict(n=4, tau_decay=1.5),
            dict(n=4, tau_min=0.0),
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            TapasConfig(**kwargs)


class TestTemperature:
    def test_step_zero(self):
        assert temperature_at(TapasConfig(n=1, tau0=2.5), 0) == 2.5

    def test_constant_when_decay_one(self):
        cfg = TapasConfig(n=1, tau0=0.7, tau_decay=1.0)
        assert temperature_at(cfg, 10_000) == 0.7

    def test_decay_value(self):
        cfg = TapasConfig(n=1, tau0=1.0, tau_decay=0.999, tau_min=0.1)
        # 0.999 ** 1000 = exp(1000 ln 0.999)
        assert temperature_at(cfg, 1000) == pytest.approx(0.36770, abs=1e-5)
        assert temperature_at(cfg, 1000) == pytest.approx(math.exp(1000 * math.log(0.999)))

    def test_floor(self):
        cfg = TapasConfig(n=1, tau0=1.0, tau_decay=0.5, tau_min=0.25)
        assert temperature_at(cfg, 10) == 0.25

    def test_negative_step(self):
        with pytest.raises(ValueError, match="step"):
            temperature_at(TapasConfig(n=1), -1)


class TestAdaptivePass:
    def test_worked_example(self):
        phi = np.array([[1.0, 0.0]])
        pres = CandidateSet(labels=np.arange(4, dtype=np.int64))
        scores = candidate_scores(phi, _toy_emb(), pres.labels, tau=1.0)
        np.testing.assert_allclose(np.exp(scores), [7.389056, 2.718282, 1.0, 0.367879], atol=1e-6)
        out = adaptive_pass(phi, pres, _toy_emb(), n=2, tau=1.0)
        np.testing.assert_array_equal(out.labels, [0, 1])
        assert out.origin == "final"

    @pytest.mark.parametrize("tau", [0.1, 1.0, 10.0])
    def test_select_all_returns_presample(self, tau):
        phi = np.array([[1.0, 0.0], [0.0, 1.0]])
        pres = CandidateSet(labels=np.arange(4, dtype=np.int64))
        out = adaptive_pass(phi, pres, _toy_emb(), n=4, tau=tau)
        np.testing.assert_array_equal(out.labels, pres.labels)

    def test_all_equal_embeddings_tie_break(self):
        emb = LabelEmbeddingTable(table=np.ones((12, 2)))
        pres = CandidateSet(labels=np.array([3, 5, 7, 9], dtype=np.int64))
        out = adaptive_pass(np.ones((2, 2)), pres, emb, n=2, tau=1.0)
        np.testing.assert_array_equal(out.labels, [3, 5])

    def test_n_exceeds_presample(self):
        pres = CandidateSet(labels=np.arange(3, dtype=np.int64))
        with pytest.raises(ValueError, match="presample"):
            adaptive_pass(np.ones((1, 2)), pres, _toy_emb(), n=4, tau=1.0)

    def test_tau_must_be_positive(self):
        pres = CandidateSet(labels=np.arange(4, dtype=np.int64))
        with pytest.raises(ValueError, match="tau"):
            adaptive_pass(np.ones((1, 2)), pres, _toy_emb(), n=2, tau=0.0)

    def test_single_context_tau_independent(self):
        for seed in range(10):
            gen = np.random.default_rng(seed)
            emb = LabelEmbeddingTable(table=gen.standard_normal((30, 4)))
            phi = gen.standard_normal((1, 4))
            pres = CandidateSet(labels=np.arange(30, dtype=np.int64))
            picks = [
                adaptive_pass(phi, pres, emb, n=6, tau=tau).labels for tau in (0.1, 1.0, 10.0)
            ]
            np.testing.assert_array_equal(picks[0], picks[1])
            np.testing.assert_array_equal(picks[0], picks[2])

    def test_uniform_bias_shift_keeps_selection(self):
        gen = np.random.default_rng(3)
        table = gen.standard_normal((20, 3))
        phi = gen.standard_normal((4, 3))
        pres = CandidateSet(labels=np.arange(20, dtype=np.int64))
        base = LabelEmbeddingTable(table=table, bias=np.zeros(20))
        shifted = LabelEmbeddingTable(table=table, bias=np.full(20, 3.0))
        a = adaptive_pass(phi, pres, base, n=5, tau=1.0)
        b = adaptive_pass(phi, pres, shifted, n=5, tau=1.0)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_low_tau_ranks_by_best_single_context(self):
        for seed in range(20):
            gen = np.random.default_rng(seed + 100)
            emb = LabelEmbeddingTable(table=gen.standard_normal((12, 5)))
            phi = gen.standard_normal((3, 5))
            pres = CandidateSet(labels=np.arange(12, dtype=np.int64))
            out = adaptive_pass(phi, pres, emb, n=4, tau=1e-6)
            best = candidate_logits(phi, emb, pres.labels).max(axis=0)
            expect = np.sort(np.argsort(-best)[:4])
            np.testing.assert_array_equal(out.labels, expect)

    def test_subset_and_size(self):
        for seed in range(10):
            gen = np.random.default_rng(seed + 200)
            emb = LabelEmbeddingTable(table=gen.standard_normal((40, 3)))
            phi = gen.standard_normal((2, 3))
            labels = np.sort(gen.choice(40, size=15, replace=False)).astype(np.int64)
            pres = CandidateSet(labels=labels)
            out = adaptive_pass(phi, pres, emb, n=7, tau=1.0)
            assert len(out) == 7
            assert np.all(np.isin(out.labels, labels))


class TestTwoPassSample:
    def test_r1_keeps_whole_presample(self):
        from tapas.sampler import sample_without_replacement

        dist = _random_dist(60, 0)
        gen = np.random.default_rng(1)
        emb = LabelEmbeddingTable(table=gen.standard_normal((60, 4)))
        phi = gen.standard_normal((3, 4))
        cfg = TapasConfig(n=8, r=1)
        out = two_pass_sample(phi, dist, emb, cfg, step=0, rng=Rng(5))
        expect = sample_without_replacement(dist, 8, Rng(5))
        np.testing.assert_array_equal(out.labels, expect.labels)
        assert out.origin == "final"

    def test_presample_covers_vocab(self):
        dist = _random_dist(6, 2)
        emb = LabelEmbeddingTable(table=np.random.default_rng(2).standard_normal((6, 3)))
        cfg = TapasConfig(n=6, r=2)
        out = two_pass_sample(np.ones((2, 3)), dist, emb, cfg, step=0, rng=Rng(0))
        np.testing.assert_array_equal(out.labels, np.arange(6))

    def test_deterministic(self):
        dist = _random_dist(200, 3)
        gen = np.random.default_rng(4)
        emb = LabelEmbeddingTable(table=gen.standard_normal((200, 6)))
        phi = gen.standard_normal((4, 6))
        cfg = TapasConfig(n=16, r=4)
        a = two_pass_sample(phi, dist, emb, cfg, step=7, rng=Rng(99))
        b = two_pass_sample(phi, dist, emb, cfg, step=7, rng=Rng(99))
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_positives_excluded(self):
        dist = _random_dist(50, 5)
        gen = np.random.default_rng(6)
        emb = LabelEmbeddingTable(table=gen.standard_normal((50, 3)))
        phi = gen.standard_normal((4, 3))
        cfg = TapasConfig(n=8, r=2)
        positives = np.array([0, 3, 3, 11], dtype=np.int64)
        out = two_pass_sample(phi, dist, emb, cfg, step=0, rng=Rng(7), positives=positives)
        assert len(out) == 8
        assert np.intersect1d(out.labels, positives).size == 0

    def test_small_vocab_shortfall(self):
        dist = _random_dist(8, 8)
        emb = LabelEmbeddingTable(table=np.random.default_rng(8).standard_normal((8, 2)))
        cfg = TapasConfig(n=8, r=1)
        positives = np.array([0, 1], dtype=np.int64)
        out = two_pass_sample(np.ones((2, 2)), dist, emb, cfg, step=0, rng=Rng(9), positives=positives)
        np.testing.assert_array_equal(out.labels, np.arange(2, 8))

    def test_custom_select_hook(self):
        dist = _random_dist(30, 9)
        emb = LabelEmbeddingTable(table=np.random.default_rng(9).standard_normal((30, 2)))
        cfg = TapasConfig(n=4, r=2)
        seen = {}

        def probe(phi, pool, emb_arg, n_eff, tau):
            seen["pool"] = pool.labels.copy()
            seen["n_eff"] = n_eff
            return CandidateSet(labels=pool.labels[:n_eff], origin="final")

        out = two_pass_sample(
            np.ones((1, 2)), dist, emb, cfg, step=0, rng=Rng(10), select=probe
        )
        assert seen["n_eff"] == 4
        assert seen["pool"].size == 8
        np.testing.assert_array_equal(out.labels, seen["pool"][:4])

    def test_pool_cut_back_to_nominal_size_after_exclusion(self):
        from tapas.sampler import sample_ranked

        dist = _random_dist(50, 12)
        emb = LabelEmbeddingTable(table=np.random.default_rng(12).standard_normal((50, 2)))
        cfg = TapasConfig(n=4, r=3)
        positives = np.array([2, 2, 9, 40], dtype=np.int64)
        seen = {}

        def probe(phi, pool, emb_arg, n_eff, tau):
            seen["pool"] = pool.labels.copy()
            return CandidateSet(labels=pool.labels[:n_eff], origin="final")

        two_pass_sample(
            np.ones((1, 2)), dist, emb, cfg, step=0, rng=Rng(13),
            positives=positives, select=probe,
        )
        draw = sample_ranked(dist, 12 + 4, Rng(13))
        expect = np.sort(draw[~np.isin(draw, positives)][:12])
        assert seen["pool"].size == 12
        np.testing.assert_array_equal(seen["pool"], expect)

    def test_r1_with_positives_is_plain_filtered_draw(self):
        # with r=1 the adaptive pass keeps everything, so the negatives are
        # just the first n non-positive labels of the ranked draw
        from tapas.sampler import sample_ranked

        dist = _random_dist(60, 14)
        gen = np.random.default_rng(14)
        emb = LabelEmbeddingTable(table=gen.standard_normal((60, 4)))
        phi = gen.standard_normal((5, 4))
        positives = np.array([1, 4, 4, 17, 30], dtype=np.int64)
        cfg = TapasConfig(n=8, r=1)
        out = two_pass_sample(
            phi, dist, emb, cfg, step=0, rng=Rng(15), positives=positives
        )
        draw = sample_ranked(dist, 8 + 5, Rng(15))
        expect = np.sort(draw[~np.isin(draw, positives)][:8])
        np.testing.assert_array_equal(out.labels, expect)
