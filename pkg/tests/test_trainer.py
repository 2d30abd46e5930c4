"""Trainer: optimizer, negative sampling, schedule, losses, checkpoints, fit."""

import json
import math

import numpy as np
import pytest

from segalign import autodiff as ad
from segalign.alignment import VocabularyTable, head_forward
from segalign.archive import EmbeddingPool, read_archive
from segalign.autodiff import Tensor
from segalign.config import TrainConfig, load_config
from segalign.encoder import detect_boundaries, encode_frames, encode_segments, next_frame_loss, pool_segments
from segalign.errors import ConfigError, DomainError, ValidationError
from segalign.losses import contrastive_from_logits
from segalign.rng import StreamSet
from segalign.synthetic import GenConfig, gen_synthetic
from segalign.trainer import (
    Adam,
    AlignmentModel,
    MaskedPredictor,
    active_losses,
    fit,
    load_checkpoint,
    masked_segment_loss,
    model_from_checkpoint,
    retrieval_loss,
    sample_negatives,
    save_checkpoint,
)


def micro_train_config(**overrides):
    base = dict(
        lr=1e-3,
        batch_size=4,
        epochs=1,
        n_neg=6,
        n_hard_max=3,
        kmeans_k=2,
        nfc_warmup_steps=2,
        nfc_negatives=3,
        frame_hidden=8,
        conv_filters=8,
        seg_hidden=8,
        out_dim=8,
        max_segments=16,
        seed=1,
    )
    base.update(overrides)
    return TrainConfig(**base)


def tiny_corpus(tmp_path, **gen_overrides):
    cfg = dict(
        num_concepts=10,
        concept_dim=6,
        frame_dim=8,
        image_dim=8,
        num_images=12,
        test_images=4,
        captions_per_image=2,
        concepts_per_caption=(2, 3),
        frames_per_concept=(5, 7),
        vocab_size=12,
        vocab_dim=8,
        simi_pairs=0,
    )
    cfg.update(gen_overrides)
    return gen_synthetic(GenConfig(**cfg), seed=5, out_dir=tmp_path / "corpus")


class TestAdam:
    def test_first_step_closed_form(self):
        p = Tensor(np.zeros((), dtype=np.float64), requires_grad=True)
        p.grad = np.asarray(1.0)
        opt = Adam({"w": p})
        opt.step(lr=1e-3)
        expected = -1e-3 * 1.0 / (1.0 + 1e-8)
        assert p.data == pytest.approx(expected, abs=1e-15)
        assert p.data == pytest.approx(-9.99999990e-4, abs=1e-12)

    def test_zero_gradient_fixed_point(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam({"w": p})
        opt.step(lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_frozen_tensor_rejected(self):
        with pytest.raises(ConfigError):
            Adam({"w": Tensor(np.ones(2))})

    def test_nonfinite_gradient_names_tensor(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.array([1.0, np.nan])
        opt = Adam({"bad_tensor": p})
        with pytest.raises(DomainError) as err:
            opt.step(lr=0.1)
        assert "bad_tensor" in str(err.value)

    def test_lr_decay_schedule(self):
        cfg = TrainConfig(lr=2e-5)
        assert cfg.lr_at_epoch(1) == pytest.approx(2e-5)
        assert cfg.lr_at_epoch(3) == pytest.approx(2e-5)
        assert cfg.lr_at_epoch(4) == pytest.approx(2e-5 * 0.95)
        assert cfg.lr_at_epoch(5) == pytest.approx(1.9e-5)
        assert cfg.lr_at_epoch(7) == pytest.approx(2e-5 * 0.95**2)


class TestSampleNegatives:
    def make_pool(self, cluster_sizes, dim=4):
        rng = np.random.default_rng(0)
        total = sum(cluster_sizes)
        pool = EmbeddingPool(matrix=rng.standard_normal((total, dim)).astype(np.float32))
        labels = np.concatenate([np.full(size, i) for i, size in enumerate(cluster_sizes)])
        pool.cluster_of = labels
        return pool

    def test_large_cluster_hits_hard_cap(self):
        pool = self.make_pool([600, 1500])
        idx = sample_negatives(pool, positive_image_id=0, n_neg=1024, n_hard_max=512, rng=np.random.default_rng(1))
        in_cluster = (pool.cluster_of[idx] == 0).sum()
        assert len(idx) == 1024
        assert in_cluster == 512

    def test_small_cluster_takes_all_but_positive(self):
        pool = self.make_pool([100, 1500])
        idx = sample_negatives(pool, positive_image_id=0, n_neg=1024, n_hard_max=512, rng=np.random.default_rng(2))
        in_cluster = (pool.cluster_of[idx] == 0).sum()
        assert len(idx) == 1024
        assert in_cluster == 99

    def test_disabled_mining_uniform(self):
        pool = self.make_pool([10, 10])
        idx = sample_negatives(pool, positive_image_id=3, n_neg=19, n_hard_max=5, rng=np.random.default_rng(3), hard_mining=False)
        assert len(idx) == 19 and 3 not in idx

    def test_pool_too_small_names_requirement(self):
        pool = self.make_pool([4])
        with pytest.raises(ValidationError) as err:
            sample_negatives(pool, 0, n_neg=8, n_hard_max=4, rng=np.random.default_rng(0))
        assert "9" in str(err.value)

    def test_invariants_over_many_trials(self):
        pool = self.make_pool([13, 17, 10])
        rng = np.random.default_rng(4)
        for trial in range(10_000):
            positive = int(rng.integers(0, 40))
            idx = sample_negatives(pool, positive, n_neg=16, n_hard_max=8, rng=rng)
            assert len(idx) == 16
            assert len(set(idx.tolist())) == 16
            assert positive not in idx

    def test_outside_exhausted_refills_from_cluster(self):
        pool = self.make_pool([30, 4])
        idx = sample_negatives(pool, positive_image_id=0, n_neg=20, n_hard_max=8, rng=np.random.default_rng(5))
        assert len(idx) == 20 and len(set(idx.tolist())) == 20
        assert (pool.cluster_of[idx] == 1).sum() == 4


class TestSchedule:
    def test_warmup_only_nfc(self):
        assert active_losses(step=50, epoch=1) == {"nfc"}

    def test_joint_after_warmup(self):
        assert active_losses(step=200, epoch=1) == {"nfc", "ret"}
        assert active_losses(step=100, epoch=1) == {"nfc", "ret"}
        assert active_losses(step=99, epoch=1) == {"nfc"}

    def test_retrieval_only_later_epochs(self):
        for step in (0, 99, 100, 10_000):
            assert active_losses(step, epoch=2) == {"ret"}
            assert active_losses(step, epoch=7) == {"ret"}


class TestRetrievalLoss:
    def test_equal_logits_log2(self):
        a = Tensor(np.array([1.0, 0.0]))
        loss = retrieval_loss(a, positive=np.array([0.0, 1.0]), negatives=np.array([[0.0, 1.0]]), temperature=1.0)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_separated_dots_unit_temperature(self):
        a = Tensor(np.array([1.0, 0.0]))
        loss = retrieval_loss(a, positive=np.array([1.0, 0.0]), negatives=np.array([[0.0, 1.0]]), temperature=1.0)
        assert loss.item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
        assert loss.item() == pytest.approx(0.3132617, abs=1e-7)

    def test_temperature_sharpening(self):
        a = Tensor(np.array([1.0, 0.0]))
        loss = retrieval_loss(a, positive=np.array([1.0, 0.0]), negatives=np.array([[0.0, 1.0]]), temperature=0.07)
        expected = math.log1p(math.exp(-1 / 0.07))
        assert loss.item() == pytest.approx(expected, rel=1e-9)
        assert expected == pytest.approx(6.2e-7, rel=0.01)

    def test_all_equal_dots_log_n_plus_1(self):
        rng = np.random.default_rng(0)
        a = Tensor(np.array([1.0, 0.0, 0.0]))
        same = np.array([0.0, 1.0, 0.0])
        negs = np.tile(same, (9, 1))
        loss = retrieval_loss(a, same, negs, temperature=0.5)
        assert loss.item() == pytest.approx(math.log(10), abs=1e-12)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = Tensor(rng.standard_normal(6))
            loss = retrieval_loss(a, rng.standard_normal(6), rng.standard_normal((8, 6)), 0.07)
            assert loss.item() >= 0

    def test_gradients(self):
        rng = np.random.default_rng(2)
        pos, negs = rng.standard_normal(5), rng.standard_normal((6, 5))
        a = Tensor(rng.standard_normal(5), requires_grad=True)
        report = ad.grad_check(lambda x: retrieval_loss(x, pos, negs, 0.07), [a], h=1e-4, tol=1e-4)
        assert report.passed, report.worst


class TestMaskedSegmentLoss:
    def test_zero_mask_prob_gives_zero(self):
        predictor = MaskedPredictor(6, np.random.default_rng(0), dtype=np.float64)
        segments = Tensor(np.random.default_rng(1).standard_normal((4, 6)))
        loss = masked_segment_loss(segments, 0.0, predictor, np.random.default_rng(2))
        assert loss.item() == 0.0

    def test_contrastive_value_for_perfect_prediction(self):
        # predictor output equal to the true row, two orthogonal others
        logits = Tensor(np.array([[1.0, 0.0, 0.0]]))
        expected = -math.log(math.exp(1) / (math.exp(1) + 2))
        assert contrastive_from_logits(logits).item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.5514, abs=1e-4)

    def test_deterministic_given_seed(self):
        predictor = MaskedPredictor(6, np.random.default_rng(0), dtype=np.float64)
        segments = Tensor(np.random.default_rng(1).standard_normal((5, 6)))
        l1 = masked_segment_loss(segments, 0.5, predictor, np.random.default_rng(7)).item()
        l2 = masked_segment_loss(segments, 0.5, predictor, np.random.default_rng(7)).item()
        assert l1 == l2

    def test_needs_two_segments(self):
        predictor = MaskedPredictor(6, np.random.default_rng(0))
        with pytest.raises(DomainError):
            masked_segment_loss(Tensor(np.ones((1, 6))), 0.5, predictor, np.random.default_rng(0))

    def test_gradients(self):
        predictor = MaskedPredictor(5, np.random.default_rng(3), dtype=np.float64)
        segments = Tensor(np.random.default_rng(4).standard_normal((4, 5)), requires_grad=True)
        inputs = [segments] + list(predictor.parameters().values())
        report = ad.grad_check(
            lambda *ts: masked_segment_loss(ts[0], 0.6, predictor, np.random.default_rng(9)),
            inputs,
            h=1e-4,
            tol=1e-4,
            max_coords_per_input=6,
        )
        assert report.passed, report.worst


class TestCheckpointContainer:
    def test_round_trip(self, tmp_path):
        arrays = {
            "a": np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32),
            "b": np.random.default_rng(1).standard_normal(7).astype(np.float32),
        }
        path = save_checkpoint(tmp_path / "c.ckpt", {"mode": "test", "epoch": 3}, arrays)
        meta, back = load_checkpoint(path)
        assert meta["epoch"] == 3
        for name in arrays:
            assert back[name].tobytes() == arrays[name].tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(ValidationError):
            load_checkpoint(p)

    def test_truncated_blob_rejected(self, tmp_path):
        arrays = {"a": np.ones(4, dtype=np.float32)}
        path = save_checkpoint(tmp_path / "c.ckpt", {}, arrays)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValidationError):
            load_checkpoint(path)


class TestFit:
    def test_smoke_and_metrics_schema(self, tmp_path):
        paths = tiny_corpus(tmp_path)
        config = micro_train_config()
        result = fit(paths["train"], config, tmp_path / "run")
        lines = [json.loads(l) for l in result.metrics_path.read_text().splitlines()]
        assert lines, "no metrics logged"
        for rec in lines:
            assert set(rec) == {"epoch", "step", "loss_nfc", "loss_ret", "loss_reg", "loss_aux", "lr"}
            for key in ("loss_nfc", "loss_ret"):
                if rec[key] is not None:
                    assert np.isfinite(rec[key])
        # warmup steps log only the next-frame loss
        for rec in lines:
            if rec["epoch"] == 1 and rec["step"] < config.nfc_warmup_steps:
                assert rec["loss_nfc"] is not None and rec["loss_ret"] is None
            if rec["epoch"] == 1 and rec["step"] >= config.nfc_warmup_steps:
                assert rec["loss_ret"] is not None
        assert (tmp_path / "run" / "resolved_config.json").exists()

    def test_lambda_zero_matches_direct_head(self, tmp_path):
        paths = tiny_corpus(tmp_path)
        run_a = fit(paths["train"], micro_train_config(head="direct"), tmp_path / "a")
        run_b = fit(paths["train"], micro_train_config(head="regularized", lam=0.0), tmp_path / "b")
        assert run_a.metrics_path.read_bytes() == run_b.metrics_path.read_bytes()

    def test_determinism_bit_identical(self, tmp_path):
        paths = tiny_corpus(tmp_path)
        run_a = fit(paths["train"], micro_train_config(epochs=2), tmp_path / "a", val_data=paths["test"])
        run_b = fit(paths["train"], micro_train_config(epochs=2), tmp_path / "b", val_data=paths["test"])
        assert run_a.checkpoint_path.read_bytes() == run_b.checkpoint_path.read_bytes()
        assert run_a.metrics_path.read_bytes() == run_b.metrics_path.read_bytes()
        assert run_a.val_metrics_path.read_bytes() == run_b.val_metrics_path.read_bytes()

    def test_resume_reproduces_next_steps_bit_identically(self, tmp_path):
        paths = tiny_corpus(tmp_path)
        full = fit(paths["train"], micro_train_config(epochs=2), tmp_path / "full")
        part = fit(paths["train"], micro_train_config(epochs=1), tmp_path / "part")
        resumed = fit(
            paths["train"],
            micro_train_config(epochs=2),
            tmp_path / "part",
            resume_from=tmp_path / "part" / "checkpoint_ep001.ckpt",
        )
        full_lines = full.metrics_path.read_text().splitlines()
        resumed_lines = resumed.metrics_path.read_text().splitlines()
        assert full_lines == resumed_lines
        assert full.checkpoint_path.read_bytes() == resumed.checkpoint_path.read_bytes()

    def test_frozen_parts_untouched_by_training(self, tmp_path):
        paths = tiny_corpus(tmp_path)
        config = micro_train_config(head="vq")
        result = fit(paths["train"], config, tmp_path / "run")
        train_ds = read_archive(paths["train"])
        model = model_from_checkpoint(result.checkpoint_path, train_ds)
        fresh = AlignmentModel(config, train_ds.manifest.frame_dim, train_ds.manifest.image_dim, VocabularyTable.from_archive(train_ds), StreamSet(config.seed).get("init"))
        assert model.frozen_digest() == fresh.frozen_digest()
        meta, _ = load_checkpoint(result.checkpoint_path)
        assert meta["frozen_digest"] == fresh.frozen_digest()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
    def test_diverged_loss_aborts_with_last_checkpoint(self, tmp_path):
        from segalign.trainer import TrainingAborted

        paths = tiny_corpus(tmp_path)
        config = micro_train_config(epochs=3, lr=1e14, nfc_warmup_steps=0)
        with pytest.raises(TrainingAborted) as err:
            fit(paths["train"], config, tmp_path / "run")
        assert "checkpoint" in str(err.value)
        path = err.value.checkpoint_path
        assert path is None or path.exists()

    def test_checkpoint_reload_reproduces_embeddings(self, tmp_path):
        paths = tiny_corpus(tmp_path)
        result = fit(paths["train"], micro_train_config(), tmp_path / "run")
        ds = read_archive(paths["train"])
        m1 = model_from_checkpoint(result.checkpoint_path, ds)
        m2 = model_from_checkpoint(result.checkpoint_path, ds)
        frames = ds.utterance_frames(ds.utterances[0])
        assert m1.joint_embedding(frames).tobytes() == m2.joint_embedding(frames).tobytes()


class TestCompositeGradient:
    def test_full_loss_on_two_utterance_microbatch(self):
        # NFC + RET + lam*reg + aux on a float64 micro model, one batch
        config = micro_train_config(head="regularized", lam=0.4, aux_mlm=True, mask_prob=0.6, frame_hidden=16)
        rng = np.random.default_rng(0)
        vocab = VocabularyTable(rng.standard_normal((10, 8)))
        streams = StreamSet(3)
        model = AlignmentModel(config, frame_dim=6, joint_dim=6, vocab=vocab, init_rng=streams.get("init"), dtype=np.float64)
        utterances = [rng.standard_normal((9, 6)), rng.standard_normal((12, 6))]
        positives = [rng.standard_normal(6), rng.standard_normal(6)]
        negatives = [rng.standard_normal((5, 6)), rng.standard_normal((5, 6))]
        starts = []
        for frames in utterances:
            encoded = encode_frames(frames, model.encoder)
            # generic position: no dead frame rows (zero rows break cosines)
            assert np.linalg.norm(encoded.numpy(), axis=1).min() > 1e-8
            starts.append(detect_boundaries(encoded.numpy(), config.boundary_threshold, config.max_segments))

        def build(*tensors):
            nfc_terms, ret_terms, reg_terms, aux_terms = [], [], [], []
            draw = np.random.default_rng(42)
            for i, frames in enumerate(utterances):
                encoded = encode_frames(frames, model.encoder)
                nfc_terms.append(next_frame_loss(encoded, config.nfc_negatives, draw))
                segments = encode_segments(pool_segments(encoded, starts[i]), model.encoder)
                a, reg = head_forward(segments, model.head, model.text_encoder, model.vocab)
                ret_terms.append(retrieval_loss(a, positives[i], negatives[i], config.tau_ret))
                if reg is not None:
                    reg_terms.append(reg)
                if segments.shape[0] >= 2:
                    aux_terms.append(masked_segment_loss(segments, config.mask_prob, model.predictor, draw))
            total = ad.add(
                ad.mul(ad.add(nfc_terms[0], nfc_terms[1]), Tensor(np.asarray(0.5))),
                ad.mul(ad.add(ret_terms[0], ret_terms[1]), Tensor(np.asarray(0.5))),
            )
            for extra, weight in ((reg_terms, config.lam), (aux_terms, config.aux_weight)):
                if extra:
                    acc = extra[0]
                    for term in extra[1:]:
                        acc = ad.add(acc, term)
                    total = ad.add(total, ad.mul(acc, Tensor(np.asarray(weight / len(extra)))))
            return total

        inputs = list(model.trainable().values())
        report = ad.grad_check(build, inputs, h=1e-4, tol=1e-4, max_coords_per_input=4, rng=np.random.default_rng(0))
        assert report.passed, report.worst


class TestLoadConfig:
    def test_empty_file_gives_reference_defaults(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{}")
        cfg = load_config(p)
        assert cfg.lr == 2e-5
        assert cfg.batch_size == 21
        assert cfg.lr_decay == 0.95 and cfg.lr_decay_every_epochs == 3
        assert cfg.n_neg == 1024 and cfg.n_hard_max == 512
        assert cfg.tau_ret == 0.07

    def test_override_precedence(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"lr": 5e-4}))
        cfg = load_config(p, overrides={"lr": 1e-4})
        assert cfg.lr == 1e-4

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            load_config({"foo": 1})

    def test_invalid_value_names_field(self):
        with pytest.raises(ConfigError) as err:
            load_config({"lam": -1})
        assert "lam" in str(err.value)

    def test_type_mismatch_names_key(self):
        with pytest.raises(ConfigError) as err:
            load_config({"batch_size": "many"})
        assert "batch_size" in str(err.value)
