"""Frozen text encoder, vocabulary table, and the three alignment heads."""

import math

import numpy as np
import pytest

from segalign import autodiff as ad
from segalign.alignment import (
    AlignmentHead,
    FrozenTextEncoder,
    VocabularyTable,
    cosine_matrix,
    head_forward,
    quantize_straight_through,
    soft_quantize,
    vocab_reg_loss,
)
from segalign.autodiff import Tensor
from segalign.errors import ConfigError, DomainError, ShapeError, ValidationError


def unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


@pytest.fixture
def vocab64():
    return VocabularyTable(unit_rows(np.random.default_rng(0), 12, 6))


class TestFrozenTextEncoder:
    def test_output_unit_norm(self):
        enc = FrozenTextEncoder(seed=1, input_dim=8, joint_dim=6, dtype=np.float64)
        rng = np.random.default_rng(2)
        for m in (1, 3, 7):
            a = enc.encode(Tensor(rng.standard_normal((m, 8))))
            assert np.linalg.norm(a.numpy()) == pytest.approx(1.0, abs=1e-5)

    def test_deterministic_given_seed(self):
        s = np.random.default_rng(3).standard_normal((4, 8))
        a1 = FrozenTextEncoder(seed=9, input_dim=8, joint_dim=6, dtype=np.float64).encode(Tensor(s))
        a2 = FrozenTextEncoder(seed=9, input_dim=8, joint_dim=6, dtype=np.float64).encode(Tensor(s))
        assert a1.numpy().tobytes() == a2.numpy().tobytes()

    def test_different_seed_differs(self):
        s = np.random.default_rng(3).standard_normal((4, 8))
        a1 = FrozenTextEncoder(seed=9, input_dim=8, joint_dim=6, dtype=np.float64).encode(Tensor(s))
        a2 = FrozenTextEncoder(seed=10, input_dim=8, joint_dim=6, dtype=np.float64).encode(Tensor(s))
        assert not np.allclose(a1.numpy(), a2.numpy())

    def test_row_permutation_changes_output(self):
        # positional encodings break permutation invariance
        enc = FrozenTextEncoder(seed=4, input_dim=8, joint_dim=6, dtype=np.float64)
        s = np.random.default_rng(5).standard_normal((3, 8))
        a = enc.encode(Tensor(s)).numpy()
        b = enc.encode(Tensor(s[[1, 2, 0]])).numpy()
        assert np.abs(a - b).max() > 1e-4

    def test_segment_count_bounds(self):
        enc = FrozenTextEncoder(seed=1, input_dim=8, joint_dim=6, max_positions=4)
        with pytest.raises(ShapeError):
            enc.encode(Tensor(np.zeros((5, 8))))
        with pytest.raises(ShapeError):
            enc.encode(Tensor(np.zeros((0, 8)).reshape(0, 8)))

    def test_heads_must_divide_input(self):
        with pytest.raises(ConfigError):
            FrozenTextEncoder(seed=1, input_dim=10, joint_dim=6, heads=4)

    def test_differentiable_wrt_inputs(self):
        enc = FrozenTextEncoder(seed=6, input_dim=8, joint_dim=6, dtype=np.float64)
        w = np.random.default_rng(7).standard_normal(6)
        s = Tensor(np.random.default_rng(8).standard_normal((3, 8)), requires_grad=True)
        report = ad.grad_check(lambda x: ad.dot(enc.encode(x), Tensor(w)), [s], h=1e-4, tol=1e-4)
        assert report.passed, report.worst

    def test_native_representation_unit_norm(self):
        enc = FrozenTextEncoder(seed=2, input_dim=8, joint_dim=6, dtype=np.float64)
        native = enc.encode_native(Tensor(np.random.default_rng(1).standard_normal((4, 8))))
        assert native.shape == (8,)
        assert np.linalg.norm(native.numpy()) == pytest.approx(1.0, abs=1e-5)


class TestVocabularyTable:
    def test_rows_normalized_on_load(self):
        raw = np.random.default_rng(0).standard_normal((5, 4)) * 3.7
        vocab = VocabularyTable(raw)
        np.testing.assert_allclose(np.linalg.norm(vocab.matrix, axis=1), 1.0, atol=1e-5)

    def test_too_small_rejected(self):
        with pytest.raises(ValidationError):
            VocabularyTable(np.ones((1, 4)))

    def test_zero_row_rejected(self):
        m = np.ones((3, 4))
        m[1] = 0
        with pytest.raises(ValidationError):
            VocabularyTable(m)


class TestCosineMatrix:
    def test_vocab_row_self_similarity(self, vocab64):
        segments = Tensor(vocab64.matrix[[3, 5]].astype(np.float64))
        C = cosine_matrix(segments, vocab64).numpy()
        assert C[0, 3] == pytest.approx(1.0, abs=1e-10)
        assert C[1, 5] == pytest.approx(1.0, abs=1e-10)

    def test_orthogonal_gives_zero_row(self):
        vocab = VocabularyTable(np.eye(4)[:3])
        seg = Tensor(np.array([[0.0, 0.0, 0.0, 2.0]]))
        np.testing.assert_allclose(cosine_matrix(seg, vocab).numpy(), np.zeros((1, 3)), atol=1e-12)

    def test_scale_invariance(self, vocab64):
        s = np.random.default_rng(1).standard_normal((3, 6))
        c1 = cosine_matrix(Tensor(s), vocab64).numpy()
        c2 = cosine_matrix(Tensor(2.0 * s), vocab64).numpy()
        np.testing.assert_allclose(c1, c2, atol=1e-12)

    def test_zero_norm_segment_rejected(self, vocab64):
        with pytest.raises(DomainError) as err:
            cosine_matrix(Tensor(np.zeros((2, 6))), vocab64)
        assert "row 0" in str(err.value)

    def test_dim_mismatch(self, vocab64):
        with pytest.raises(ShapeError):
            cosine_matrix(Tensor(np.ones((2, 5))), vocab64)


class TestVocabRegLoss:
    def test_zero_when_segments_are_vocab_rows(self, vocab64):
        segments = Tensor(vocab64.matrix[[0, 4, 7]].astype(np.float64))
        loss = vocab_reg_loss(cosine_matrix(segments, vocab64))
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_single_row_half_max(self):
        loss = vocab_reg_loss(Tensor(np.array([[0.5, 0.2, -0.3]])))
        assert loss.item() == pytest.approx(-math.log(0.5), abs=1e-12)
        assert loss.item() == pytest.approx(0.6931, abs=1e-4)

    def test_nonpositive_row_max_identifies_segment(self):
        with pytest.raises(DomainError) as err:
            vocab_reg_loss(Tensor(np.array([[0.5, 0.1], [-0.2, -0.4]])))
        assert "segment 1" in str(err.value)

    def test_nonnegative_for_cosine_inputs(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            C = rng.uniform(0.01, 1.0, size=(4, 6))
            assert vocab_reg_loss(Tensor(C)).item() >= -1e-12

    def test_gradients(self, vocab64):
        s = Tensor(np.random.default_rng(3).standard_normal((3, 6)), requires_grad=True)
        report = ad.grad_check(lambda x: vocab_reg_loss(cosine_matrix(x, vocab64)), [s], h=1e-4, tol=1e-4)
        assert report.passed, report.worst


class TestSoftQuantize:
    def test_infinite_temperature_gives_vocab_mean(self, vocab64):
        row = Tensor(np.random.default_rng(1).standard_normal(12))
        h = soft_quantize(row, vocab64, temperature=1e9).numpy()
        np.testing.assert_allclose(h, vocab64.matrix.mean(axis=0), atol=1e-6)

    def test_two_entry_softmax_arithmetic(self):
        vocab = VocabularyTable(np.array([[1.0, 0.0], [0.0, 1.0]]))
        h = soft_quantize(Tensor(np.array([1.0, 0.0])), vocab, temperature=1.0).numpy()
        w = math.exp(1) / (math.exp(1) + 1)
        np.testing.assert_allclose(h, [w, 1 - w], atol=1e-12)
        assert w == pytest.approx(0.7311, abs=1e-4)

    def test_tiny_temperature_gives_argmax_row(self, vocab64):
        row = np.random.default_rng(2).standard_normal(12)
        h = soft_quantize(Tensor(row), vocab64, temperature=1e-9).numpy()
        np.testing.assert_allclose(h, vocab64.matrix[np.argmax(row)], atol=1e-6)

    def test_nonpositive_temperature_rejected(self, vocab64):
        with pytest.raises(ConfigError):
            soft_quantize(Tensor(np.zeros(12)), vocab64, temperature=0.0)


class TestStraightThrough:
    def test_forward_is_exact_vocab_row(self, vocab64):
        rng = np.random.default_rng(4)
        for _ in range(50):
            row = rng.standard_normal(12)
            h = quantize_straight_through(Tensor(row), vocab64, temperature=0.1).numpy()
            assert h.tobytes() == vocab64.matrix[np.argmax(row)].astype(h.dtype).tobytes()

    def test_tie_breaks_to_smallest_index(self, vocab64):
        row = np.zeros(12)
        row[2] = row[5] = 0.9
        h = quantize_straight_through(Tensor(row), vocab64, temperature=0.1).numpy()
        assert np.array_equal(h, vocab64.matrix[2])

    def test_backward_equals_soft_path(self, vocab64):
        rng = np.random.default_rng(5)
        w = rng.standard_normal(6)
        seg = Tensor(rng.standard_normal((1, 6)), requires_grad=True)

        def through_st(x):
            row = ad.reshape(cosine_matrix(x, vocab64), (12,))
            return ad.dot(quantize_straight_through(row, vocab64, 0.1), Tensor(w))

        def through_soft(x):
            row = ad.reshape(cosine_matrix(x, vocab64), (12,))
            return ad.dot(soft_quantize(row, vocab64, 0.1), Tensor(w))

        ad.backward(through_st(seg))
        g_st = ad.gradient(seg).copy()
        seg.zero_grad()
        ad.backward(through_soft(seg))
        np.testing.assert_allclose(g_st, ad.gradient(seg), atol=1e-12)


class TestHeadForward:
    def test_direct_head_no_extra_loss(self, vocab64):
        enc = FrozenTextEncoder(seed=7, input_dim=6, joint_dim=6, heads=2, dtype=np.float64)
        s = Tensor(np.random.default_rng(6).standard_normal((3, 6)))
        a, extra = head_forward(s, AlignmentHead(kind="direct"), enc, None)
        assert extra is None
        assert np.linalg.norm(a.numpy()) == pytest.approx(1.0, abs=1e-5)

    def test_regularized_head_returns_loss(self, vocab64):
        enc = FrozenTextEncoder(seed=7, input_dim=6, joint_dim=6, heads=2, dtype=np.float64)
        s = Tensor(np.abs(np.random.default_rng(6).standard_normal((3, 6))))
        a, extra = head_forward(s, AlignmentHead(kind="regularized", lam=0.5), enc, vocab64)
        assert extra is not None and extra.item() >= 0

    def test_vq_head_output_in_vocab_span(self, vocab64):
        enc = FrozenTextEncoder(seed=7, input_dim=6, joint_dim=6, heads=2, dtype=np.float64)
        s = Tensor(np.random.default_rng(8).standard_normal((2, 6)))
        a, extra = head_forward(s, AlignmentHead(kind="vq", tau_vq=0.1), enc, vocab64)
        assert extra is None
        assert np.linalg.norm(a.numpy()) == pytest.approx(1.0, abs=1e-5)

    def test_regularized_total_exactly_additive(self, vocab64):
        # evaluating L and L_reg separately and summing matches the fused
        # in-graph total to 1e-12 in float64
        import segalign.trainer as trainer

        enc = FrozenTextEncoder(seed=11, input_dim=6, joint_dim=6, heads=2, dtype=np.float64)
        rng = np.random.default_rng(12)
        s = Tensor(np.abs(rng.standard_normal((3, 6))))
        lam = 0.7
        a, reg = head_forward(s, AlignmentHead(kind="regularized", lam=lam), enc, vocab64)
        ret = trainer.retrieval_loss(a, rng.standard_normal(6), rng.standard_normal((4, 6)), 0.07)
        fused = ad.add(ret, ad.mul(reg, Tensor(np.asarray(lam))))
        assert fused.item() == pytest.approx(ret.item() + lam * reg.item(), abs=1e-12)

    def test_head_validation(self):
        with pytest.raises(ConfigError):
            AlignmentHead(kind="nope").validate()
        with pytest.raises(ConfigError):
            AlignmentHead(kind="regularized", lam=-1).validate()
        with pytest.raises(ConfigError):
            AlignmentHead(kind="vq", tau_vq=0).validate()
        with pytest.raises(ConfigError):
            head_forward(Tensor(np.ones((2, 6))), AlignmentHead(kind="vq"), FrozenTextEncoder(seed=1, input_dim=6, joint_dim=4, heads=2), None)
