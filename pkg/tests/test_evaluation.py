"""Evaluation harness: recall, semantic retrieval, spearman, boundary F1."""

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from segalign.archive import SimiPair
from segalign.errors import DomainError, ValidationError
from segalign.evaluation import (
    RetrievalReport,
    average_ranks,
    boundary_f1,
    eval_simi,
    recall_at_k,
    semantic_audio_retrieval,
    spearman,
)


class TestRecallAtK:
    def test_identity_similarity_perfect(self):
        images = np.eye(6)
        captions = np.repeat(images, 2, axis=0)
        gold = np.repeat(np.arange(6), 2)
        report = recall_at_k(captions, images, gold, ks=(1, 5))
        assert report.speech_to_image == {1: 1.0, 5: 1.0}
        assert report.image_to_speech == {1: 1.0, 5: 1.0}
        assert report.mean == {1: 1.0, 5: 1.0}

    def test_mean_of_directions_reproduces_published_rows(self):
        # Image 28.2/55.3/67.5 with Speech 28.5/56.1/68.9 must average to
        # 28.35 / 55.7 / 68.2
        report = RetrievalReport.from_directions(
            (1, 5, 10),
            {1: 0.282, 5: 0.553, 10: 0.675},
            {1: 0.285, 5: 0.561, 10: 0.689},
        )
        assert report.mean[5] == pytest.approx(0.557, abs=1e-12)
        assert report.mean[10] == pytest.approx(0.682, abs=1e-12)
        assert report.mean[1] == pytest.approx(0.2835, abs=1e-12)
        assert abs(report.mean[1] * 100 - 28.4) <= 0.05 + 1e-9  # printed value, rounded

    def test_gold_ranked_last(self):
        images = np.eye(5)
        caption = (images.sum(axis=0) - 0.9 * images[3])[None, :]
        report = recall_at_k(caption, images, np.array([3]), ks=(1, 5))
        assert report.speech_to_image[1] == 0.0
        assert report.speech_to_image[5] == 1.0

    def test_monotone_in_k(self):
        rng = np.random.default_rng(0)
        captions = rng.standard_normal((40, 8))
        images = rng.standard_normal((10, 8))
        gold = rng.integers(0, 10, size=40)
        report = recall_at_k(captions, images, gold, ks=(1, 2, 5, 10))
        values = [report.mean[k] for k in (1, 2, 5, 10)]
        assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))

    def test_rotation_invariance(self):
        rng = np.random.default_rng(1)
        captions = rng.standard_normal((30, 8))
        images = rng.standard_normal((12, 8))
        gold = rng.integers(0, 12, size=30)
        q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        before = recall_at_k(captions, images, gold)
        after = recall_at_k(captions @ q, images @ q, gold)
        for k in before.ks:
            assert before.mean[k] == pytest.approx(after.mean[k], abs=1e-5)

    def test_any_caption_hit_rule(self):
        images = np.array([[1.0, 0.0]])
        captions = np.array([[1.0, 0.05], [0.05, 1.0]])  # one close, one far
        report = recall_at_k(captions, images, np.array([0, 0]), ks=(1,))
        assert report.image_to_speech[1] == 1.0

    def test_ties_break_to_lower_index(self):
        images = np.array([[1.0, 0.0], [1.0, 0.0]])  # identical candidates
        caption = np.array([[1.0, 0.0]])
        assert recall_at_k(caption, images, np.array([0]), ks=(1,)).speech_to_image[1] == 1.0
        assert recall_at_k(caption, images, np.array([1]), ks=(1,)).speech_to_image[1] == 0.0

    def test_empty_candidates_rejected(self):
        with pytest.raises(ValidationError):
            recall_at_k(np.ones((2, 3)), np.zeros((0, 3)), np.zeros(2, dtype=int))


class TestSemanticAudioRetrieval:
    def test_candidates_equal_queries(self):
        rng = np.random.default_rng(2)
        embs = rng.standard_normal((7, 5))
        images = np.arange(7)
        recall = semantic_audio_retrieval(embs, embs, images, images, ks=(1,))
        assert recall[1] == 1.0

    def test_single_pair_degenerate(self):
        recall = semantic_audio_retrieval(np.ones((1, 4)), np.ones((1, 4)) * 2, np.array([0]), np.array([0]), ks=(1,))
        assert recall[1] == 1.0

    def test_chance_level(self):
        # random queries over N random candidates hit at 1/N on average
        rng = np.random.default_rng(3)
        n_candidates, trials = 8, 10_000
        hits = 0
        for _ in range(trials // 100):
            candidates = rng.standard_normal((n_candidates, 16))
            queries = rng.standard_normal((100, 16))
            gold = rng.integers(0, n_candidates, size=100)
            recall = semantic_audio_retrieval(queries, candidates, gold, np.arange(n_candidates), ks=(1,))
            hits += recall[1] * 100
        p = 1.0 / n_candidates
        sigma = np.sqrt(p * (1 - p) / trials)
        assert abs(hits / trials - p) <= 3 * sigma

    def test_query_without_candidate_rejected(self):
        with pytest.raises(ValidationError):
            semantic_audio_retrieval(np.ones((1, 3)), np.ones((1, 3)), np.array([5]), np.array([0]))


class TestSpearman:
    def test_monotone(self):
        assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0, abs=1e-12)

    def test_antitone(self):
        assert spearman([1, 2, 3], [30, 20, 10]) == pytest.approx(-1.0, abs=1e-12)

    def test_tied_example_matches_hand_computation(self):
        # ranks of [1,2,2,3] are [1, 2.5, 2.5, 4]; Pearson vs [1,2,3,4] is 3/sqrt(10)
        rho = spearman([1, 2, 2, 3], [1, 2, 3, 4])
        assert rho == pytest.approx(3 / np.sqrt(10), abs=1e-12)

    def test_matches_rank_then_pearson_oracle_on_ties(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = int(rng.integers(3, 30))
            xs = rng.integers(0, 6, size=n).astype(float)  # heavy ties
            ys = rng.integers(0, 6, size=n).astype(float)
            rx, ry = scipy.stats.rankdata(xs), scipy.stats.rankdata(ys)
            if rx.std() == 0 or ry.std() == 0:
                continue
            oracle = np.corrcoef(rx, ry)[0, 1]
            assert spearman(xs, ys) == pytest.approx(oracle, abs=1e-12)

    def test_average_ranks(self):
        np.testing.assert_allclose(average_ranks([1, 2, 2, 3]), [1, 2.5, 2.5, 4])

    def test_zero_variance_rejected(self):
        with pytest.raises(DomainError):
            spearman([1, 1, 1], [1, 2, 3])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_invariant_under_monotone_transform(self, seed):
        rng = np.random.default_rng(seed)
        xs = rng.standard_normal(12)
        ys = rng.standard_normal(12)
        base = spearman(xs, ys)
        assert spearman(np.exp(xs), ys) == pytest.approx(base, abs=1e-12)
        assert spearman(xs, 3 * ys + 7) == pytest.approx(base, abs=1e-12)


class TestEvalSimi:
    def test_constructed_monotone_set(self):
        rng = np.random.default_rng(5)
        embs = {f"u{i}": rng.standard_normal(6) for i in range(10)}
        pairs = []
        for i in range(0, 10, 2):
            a, b = embs[f"u{i}"], embs[f"u{i + 1}"]
            cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
            pairs.append(SimiPair(utt_a=f"u{i}", utt_b=f"u{i + 1}", score=float(5 + 5 * cos)))
        assert eval_simi(embs, pairs) == pytest.approx(100.0, abs=1e-9)

    def test_degenerate_cosines_surface_error(self):
        embs = {"a": np.ones(4), "b": np.ones(4), "c": np.ones(4)}
        pairs = [SimiPair("a", "b", 3.0), SimiPair("a", "c", 7.0)]
        with pytest.raises(DomainError):
            eval_simi(embs, pairs)

    def test_missing_utterance_names_id(self):
        with pytest.raises(ValidationError) as err:
            eval_simi({"a": np.ones(3)}, [SimiPair("a", "missing", 1.0)])
        assert "missing" in str(err.value)


class TestBoundaryF1:
    def test_identical(self):
        assert boundary_f1([0, 5, 9], [0, 5, 9]) == (1.0, 1.0, 1.0)

    def test_disjoint_beyond_tolerance(self):
        p, r, f1 = boundary_f1([0, 10, 20], [4, 14, 24], tolerance_frames=1)
        assert f1 == 0.0

    def test_shift_within_tolerance(self):
        p, r, f1 = boundary_f1([1, 6, 11], [0, 5, 10], tolerance_frames=1)
        assert f1 == 1.0

    def test_precision_recall_swap_symmetry(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            pred = sorted(rng.choice(50, size=8, replace=False).tolist())
            gold = sorted(rng.choice(50, size=5, replace=False).tolist())
            p1, r1, f1a = boundary_f1(pred, gold)
            p2, r2, f1b = boundary_f1(gold, pred)
            assert p1 == pytest.approx(r2) and r1 == pytest.approx(p2)
            assert f1a == pytest.approx(f1b)

    def test_one_to_one_matching(self):
        # two predictions near one gold: only one may match
        p, r, f1 = boundary_f1([5, 6], [5], tolerance_frames=1)
        assert p == 0.5 and r == 1.0
