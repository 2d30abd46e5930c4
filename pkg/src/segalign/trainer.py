"""Training loop: retrieval loss with decoupled hard-mined negatives, the
progressive loss schedule, Adam with step decay, the optional masked-segment
auxiliary loss, and checkpointing.

Negatives come from a precomputed frozen image-embedding pool, so their
count is independent of batch size and no image encoder runs during steps.
The reference loop is single-threaded and fully deterministic given the
resolved config and seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .alignment import AlignmentHead, FrozenTextEncoder, VocabularyTable, head_forward
from .archive import Dataset, EmbeddingPool, read_archive
from .autodiff import Tensor
from .clustering import kmeans_fit
from .config import TrainConfig
from .encoder import EncoderConfig, EncoderParams, detect_boundaries, encode_frames, encode_segments, next_frame_loss, pool_segments
from .errors import ConfigError, DomainError, SegalignError, ValidationError
from .evaluation import recall_at_k
from .losses import contrastive_from_logits
from .rng import StreamSet

CHECKPOINT_MAGIC = b"SGCLIP01"


class TrainingAborted(SegalignError):
    """Raised when a loss goes non-finite; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint_path: Path | None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over named parameter tensors."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        for name, p in params.items():
            if not p.requires_grad:
                raise ConfigError(f"optimizer received frozen tensor {name!r}")
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            else:
                g = np.asarray(g, dtype=p.data.dtype).reshape(p.data.shape)
                if not np.all(np.isfinite(g)):
                    raise DomainError(f"non-finite gradient for tensor {name!r}")
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"optimizer.m.{name}"] = self.m[name]
            out[f"optimizer.v.{name}"] = self.v[name]
        return out

    def restore_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = int(t)
        for name, p in self.params.items():
            self.m[name] = np.asarray(arrays[f"optimizer.m.{name}"], dtype=p.data.dtype).reshape(p.data.shape).copy()
            self.v[name] = np.asarray(arrays[f"optimizer.v.{name}"], dtype=p.data.dtype).reshape(p.data.shape).copy()


# -- losses and sampling -------------------------------------------------------


def retrieval_loss(audio_emb: Tensor, positive: np.ndarray, negatives: np.ndarray, temperature: float | Tensor) -> Tensor:
    """-log softmax of the paired-image logit among the negatives, at the
    given temperature; single direction (the image encoder is frozen)."""
    candidates = np.concatenate([np.asarray(positive)[None, :], np.asarray(negatives)], axis=0)
    logits = ad.matvec(Tensor(candidates.astype(audio_emb.data.dtype)), audio_emb)
    if isinstance(temperature, Tensor):
        logits = ad.div(logits, temperature)
    else:
        logits = ad.mul(logits, Tensor(np.asarray(1.0 / temperature, dtype=audio_emb.data.dtype)))
    return contrastive_from_logits(logits)


def sample_negatives(pool: EmbeddingPool, positive_image_id: int, n_neg: int, n_hard_max: int, rng: np.random.Generator, hard_mining: bool = True) -> np.ndarray:
    """Exactly n_neg distinct pool indices excluding the positive.

    With hard mining, up to min(n_hard_max, cluster size - 1) indices come
    uniformly from the positive's cluster; the remainder comes uniformly from
    outside the cluster (topping back up from the cluster only if the rest of
    the pool runs out)."""
    n = len(pool)
    if n < n_neg + 1:
        raise ValidationError(f"pool of {n} too small: need at least {n_neg + 1} embeddings for {n_neg} negatives")
    if not (0 <= positive_image_id < n):
        raise ValidationError(f"positive index {positive_image_id} outside pool of {n}")
    if hard_mining and pool.cluster_of is not None:
        labels = pool.cluster_of
        same = np.nonzero(labels == labels[positive_image_id])[0]
        same = same[same != positive_image_id]
        k_hard = min(n_hard_max, len(same), n_neg)
        hard = rng.choice(same, size=k_hard, replace=False) if k_hard else np.empty(0, dtype=np.int64)
        outside = np.nonzero(labels != labels[positive_image_id])[0]
        k_rest = n_neg - k_hard
        if k_rest <= len(outside):
            rest = rng.choice(outside, size=k_rest, replace=False) if k_rest else np.empty(0, dtype=np.int64)
            return np.concatenate([hard, rest]).astype(np.int64)
        # pool outside the cluster exhausted: take it all, refill from unused cluster members
        leftover = np.setdiff1d(same, hard, assume_unique=False)
        refill = rng.choice(leftover, size=k_rest - len(outside), replace=False)
        return np.concatenate([hard, outside, refill]).astype(np.int64)
    candidates = np.delete(np.arange(n), positive_image_id)
    return rng.choice(candidates, size=n_neg, replace=False).astype(np.int64)


def active_losses(step: int, epoch: int, warmup_steps: int = 100) -> set[str]:
    """Progressive schedule: warmup on the next-frame loss, one joint epoch,
    then retrieval only.  Regularization/aux terms attach to retrieval."""
    if epoch <= 1:
        return {"nfc"} if step < warmup_steps else {"nfc", "ret"}
    return {"ret"}


class MaskedPredictor:
    """Learned mask vector plus a single self-attention layer that
    reconstructs masked segment rows."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.dim = dim

        def mat(fan_in, fan_out):
            return Tensor((rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(dtype), requires_grad=True)

        self._params = {
            "aux.mask_vec": Tensor((rng.standard_normal(dim) / np.sqrt(dim)).astype(dtype), requires_grad=True),
            "aux.wq": mat(dim, dim),
            "aux.wk": mat(dim, dim),
            "aux.wv": mat(dim, dim),
            "aux.wo": mat(dim, dim),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def reconstruct(self, masked: Tensor) -> Tensor:
        p = self._params
        q, k, v = ad.matmul(masked, p["aux.wq"]), ad.matmul(masked, p["aux.wk"]), ad.matmul(masked, p["aux.wv"])
        scale = Tensor(np.asarray(1.0 / np.sqrt(self.dim), dtype=masked.data.dtype))
        attn = ad.softmax_last(ad.mul(ad.matmul(q, ad.transpose(k)), scale))
        return ad.matmul(ad.matmul(attn, v), p["aux.wo"])


def masked_segment_loss(segments: Tensor, mask_prob: float, predictor: MaskedPredictor, rng: np.random.Generator) -> Tensor:
    """Replace Bernoulli(mask_prob) rows with the learned mask vector, let the
    predictor reconstruct them, and score each reconstruction against all
    in-utterance rows contrastively (cosine logits, temperature 1).  Returns
    a zero-valued constant when no position is masked."""
    M, d = segments.shape
    if M < 2:
        raise DomainError(f"masked_segment_loss: need at least 2 segments, got {M}")
    mask = rng.random(M) < mask_prob
    masked_idx = np.nonzero(mask)[0]
    if len(masked_idx) == 0:
        return Tensor(np.asarray(0.0, dtype=segments.data.dtype))
    keep = Tensor((1.0 - mask).astype(segments.data.dtype))
    mask_col = Tensor(mask.astype(segments.data.dtype)[:, None])
    mask_row = ad.reshape(predictor.parameters()["aux.mask_vec"], (1, d))
    masked_input = ad.add(ad.scale_colvec(segments, keep), ad.matmul(mask_col, mask_row))
    reconstructed = predictor.reconstruct(masked_input)

    flat = (masked_idx[:, None] * d + np.arange(d)[None, :]).reshape(-1)
    predicted_rows = ad.reshape(ad.gather_flat(reconstructed, flat), (len(masked_idx), d))
    cosines = ad.cosine_rows(predicted_rows, segments)
    # put each row's true segment first, the other in-utterance rows after
    logit_idx = []
    for r, j in enumerate(masked_idx):
        others = np.delete(np.arange(M), j)
        logit_idx.append(np.concatenate(([r * M + j], r * M + others)))
    logit_idx = np.stack(logit_idx)
    logits = ad.reshape(ad.gather_flat(cosines, logit_idx.reshape(-1)), logit_idx.shape)
    return contrastive_from_logits(logits)


def _mean_scalars(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    if len(terms) == 1:
        return acc
    return ad.mul(acc, Tensor(np.asarray(1.0 / len(terms), dtype=acc.data.dtype)))


# -- model assembly ------------------------------------------------------------


class AlignmentModel:
    """Segmental encoder + alignment head + frozen text encoder."""

    def __init__(self, config: TrainConfig, frame_dim: int, joint_dim: int, vocab: VocabularyTable | None, init_rng: np.random.Generator, dtype=np.float32):
        config.validate()
        self.config = config
        self.frame_dim = frame_dim
        self.joint_dim = joint_dim
        self.vocab = vocab
        self.head = AlignmentHead(kind=config.head, lam=config.lam, tau_vq=config.tau_vq)
        self.head.validate()
        if config.head in ("regularized", "vq"):
            if vocab is None:
                raise ConfigError(f"head {config.head!r} requires an archive with vocab.f32")
            if vocab.dim != config.out_dim:
                raise ConfigError(f"vocab_dim {vocab.dim} must equal out_dim {config.out_dim} for head {config.head!r}")
        encoder_cfg = EncoderConfig(
            frame_dim=frame_dim,
            frame_hidden=config.frame_hidden,
            frame_out=config.frame_out,
            conv_filters=config.conv_filters,
            seg_hidden=config.seg_hidden,
            out_dim=config.out_dim,
            boundary_threshold=config.boundary_threshold,
            nfc_negatives=config.nfc_negatives,
            max_segments=config.max_segments,
        )
        self.encoder = EncoderParams(encoder_cfg, init_rng, dtype=dtype)
        self.text_encoder = FrozenTextEncoder(
            seed=config.seed,
            input_dim=config.out_dim,
            joint_dim=joint_dim,
            max_positions=config.max_segments,
            normalize_input=config.normalize_segments,
            dtype=dtype,
        )
        self.predictor = MaskedPredictor(config.out_dim, init_rng, dtype=dtype) if config.aux_mlm else None
        self.log_tau = Tensor(np.asarray(np.log(config.tau_ret), dtype=dtype), requires_grad=True) if config.trainable_temperature else None

    def trainable(self) -> dict[str, Tensor]:
        params = dict(self.encoder.parameters())
        if self.predictor is not None:
            params.update(self.predictor.parameters())
        if self.log_tau is not None:
            params["log_tau"] = self.log_tau
        return params

    def temperature(self):
        if self.log_tau is not None:
            return ad.texp(self.log_tau)
        return self.config.tau_ret

    def segments_for(self, frames: np.ndarray) -> tuple[Tensor, list[int], Tensor]:
        encoded = encode_frames(frames, self.encoder)
        starts = detect_boundaries(encoded.numpy(), self.config.boundary_threshold, self.config.max_segments)
        segments = encode_segments(pool_segments(encoded, starts), self.encoder)
        return encoded, starts, segments

    def joint_embedding(self, frames: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            _, _, segments = self.segments_for(frames)
            a, _ = head_forward(segments, self.head, self.text_encoder, self.vocab)
        return a.numpy()

    def representation(self, frames: np.ndarray, point: str = "segment_mean") -> np.ndarray:
        """Utterance vector at a configurable extraction point."""
        with ad.no_grad():
            if point == "frame_mean":
                return encode_frames(frames, self.encoder).numpy().mean(axis=0)
            encoded, starts, segments = self.segments_for(frames)
            if point == "segment_mean":
                return segments.numpy().mean(axis=0)
            if point == "sentence":
                a, _ = head_forward(segments, self.head, self.text_encoder, self.vocab)
                return a.numpy()
        raise ConfigError(f"unknown extraction point {point!r}")

    def frozen_digest(self) -> str:
        import hashlib

        h = hashlib.sha256(self.text_encoder.weight_digest())
        if self.vocab is not None:
            h.update(self.vocab.matrix.tobytes())
        return h.hexdigest()


# -- checkpoint container --------------------------------------------------------


def save_checkpoint(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    """MAGIC + u64 json length + metadata JSON + raw float32 blob."""
    path = Path(path)
    layout = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        layout.append({"name": name, "shape": list(data.shape), "offset": offset})
        offset += data.nbytes
        blobs.append(data.tobytes())
    meta = dict(meta)
    meta["layout"] = layout
    meta["blob_bytes"] = offset
    payload = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: bad checkpoint magic {raw[:8]!r}")
    (json_len,) = struct.unpack("<Q", raw[8:16])
    meta = json.loads(raw[16 : 16 + json_len].decode("utf-8"))
    blob = raw[16 + json_len :]
    if len(blob) != meta["blob_bytes"]:
        raise ValidationError(f"{path}: blob is {len(blob)} bytes, layout declares {meta['blob_bytes']}")
    arrays = {}
    for entry in meta["layout"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 4 if shape else 4
        start = entry["offset"]
        arrays[entry["name"]] = np.frombuffer(blob[start : start + size], dtype="<f4").reshape(shape).copy()
    return meta, arrays


def model_arrays(model: AlignmentModel) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in model.trainable().items()}


def restore_model_arrays(model: AlignmentModel, arrays: dict[str, np.ndarray]) -> None:
    for name, t in model.trainable().items():
        if name not in arrays:
            raise ValidationError(f"checkpoint missing tensor {name!r}")
        t.data = np.asarray(arrays[name], dtype=t.data.dtype).reshape(t.data.shape).copy()


def model_from_checkpoint(path: str | Path, dataset: Dataset) -> AlignmentModel:
    """Rebuild a trained model against a compatible archive."""
    meta, arrays = load_checkpoint(path)
    if meta.get("mode") != "alignment":
        raise ValidationError(f"{path}: not an alignment checkpoint (mode={meta.get('mode')!r})")
    config = TrainConfig.from_dict(meta["config"])
    if dataset.manifest.image_dim != meta["joint_dim"]:
        raise ValidationError(f"archive image_dim {dataset.manifest.image_dim} != checkpoint joint_dim {meta['joint_dim']}")
    if dataset.manifest.frame_dim != meta["frame_dim"]:
        raise ValidationError(f"archive frame_dim {dataset.manifest.frame_dim} != checkpoint frame_dim {meta['frame_dim']}")
    vocab = VocabularyTable.from_archive(dataset) if meta.get("uses_vocab") else None
    streams = StreamSet(config.seed)
    model = AlignmentModel(config, meta["frame_dim"], meta["joint_dim"], vocab, streams.get("init"))
    restore_model_arrays(model, arrays)
    return model


# -- training loop ----------------------------------------------------------------


@dataclass
class FitResult:
    checkpoint_path: Path
    metrics_path: Path
    val_metrics_path: Path | None
    out_dir: Path
    epochs_run: int
    steps_run: int


def _as_dataset(data) -> Dataset:
    return data if isinstance(data, Dataset) else read_archive(data)


def _validation_recall(model: AlignmentModel, val_ds: Dataset, config: TrainConfig, rng: np.random.Generator):
    utts = [u for u in val_ds.utterances if u.image_id >= 0]
    if config.val_subsample and len(utts) > config.val_subsample:
        keep = rng.choice(len(utts), size=config.val_subsample, replace=False)
        utts = [utts[i] for i in sorted(keep)]
    embs = np.stack([model.joint_embedding(val_ds.utterance_frames(u)) for u in utts])
    gold = np.array([u.image_id for u in utts])
    pool = EmbeddingPool.from_images(val_ds, normalize=config.normalize_images)
    return recall_at_k(embs, pool.matrix, gold, ks=(1, 5, 10), config_digest=config.digest())


def fit(train_data, config: TrainConfig, out_dir: str | Path, val_data=None, resume_from: str | Path | None = None) -> FitResult:
    """Train an alignment model on an archive; deterministic given seed."""
    config.validate()
    train_ds = _as_dataset(train_data)
    val_ds = _as_dataset(val_data) if val_data is not None else None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    streams = StreamSet(config.seed)
    uses_vocab = config.head in ("regularized", "vq")
    vocab = VocabularyTable.from_archive(train_ds) if uses_vocab else None
    model = AlignmentModel(config, train_ds.manifest.frame_dim, train_ds.manifest.image_dim, vocab, streams.get("init"))

    pool = EmbeddingPool.from_images(train_ds, normalize=config.normalize_images)
    if config.hard_mining:
        k = min(config.kmeans_k, len(pool))
        pool.cluster_of = kmeans_fit(pool.matrix, k=k, rng=streams.get("clustering")).cluster_of

    train_utts = [u for u in train_ds.utterances if u.image_id >= 0]
    if not train_utts:
        raise ValidationError("archive has no image-paired utterances to train on")

    optimizer = Adam(model.trainable())
    start_epoch = 1
    global_step = 0
    if resume_from is not None:
        meta, arrays = load_checkpoint(resume_from)
        ours, theirs = config.to_dict(), dict(meta["config"])
        ours.pop("epochs"), theirs.pop("epochs")  # resuming may extend the epoch budget
        if ours != theirs:
            raise ConfigError("resume config differs from checkpoint config")
        restore_model_arrays(model, arrays)
        optimizer.restore_state(arrays, meta["optimizer_t"])
        streams.restore(meta["rng_state"])
        start_epoch = meta["epoch"] + 1
        global_step = meta["step"]

    metrics_path = out / "train_metrics.jsonl"
    val_metrics_path = out / "val_metrics.jsonl" if val_ds is not None else None
    mode = "w" if resume_from is None else "a"
    metrics_file = open(metrics_path, mode, encoding="utf-8")
    val_file = open(val_metrics_path, mode, encoding="utf-8") if val_metrics_path else None

    data_rng = streams.get("data")
    neg_rng = streams.get("negatives")
    nfc_rng = streams.get("nfc")
    mask_rng = streams.get("masking")
    val_rng = streams.get("validation")

    last_checkpoint: Path | None = None
    nfc_k = config.nfc_negatives

    def checkpoint_meta(epoch):
        return {
            "format": 1,
            "mode": "alignment",
            "config": config.to_dict(),
            "epoch": epoch,
            "step": global_step,
            "frame_dim": train_ds.manifest.frame_dim,
            "joint_dim": train_ds.manifest.image_dim,
            "uses_vocab": uses_vocab,
            "optimizer_t": optimizer.t,
            "rng_state": streams.state(),
            "frozen_digest": model.frozen_digest(),
        }

    try:
        for epoch in range(start_epoch, config.epochs + 1):
            lr = config.lr_at_epoch(epoch)
            order = data_rng.permutation(len(train_utts))
            for batch_lo in range(0, len(order), config.batch_size):
                batch = [train_utts[i] for i in order[batch_lo : batch_lo + config.batch_size]]
                active = active_losses(global_step, epoch, config.nfc_warmup_steps)
                nfc_terms: list[Tensor] = []
                ret_terms: list[Tensor] = []
                reg_terms: list[Tensor] = []
                aux_terms: list[Tensor] = []
                try:
                    for rec in batch:
                        frames = train_ds.utterance_frames(rec)
                        encoded = encode_frames(frames, model.encoder)
                        if "nfc" in active and frames.shape[0] >= nfc_k + 2:
                            nfc_terms.append(next_frame_loss(encoded, nfc_k, nfc_rng))
                        if "ret" in active:
                            starts = detect_boundaries(encoded.numpy(), config.boundary_threshold, config.max_segments)
                            segments = encode_segments(pool_segments(encoded, starts), model.encoder)
                            a, reg = head_forward(segments, model.head, model.text_encoder, model.vocab)
                            negs = sample_negatives(pool, rec.image_id, config.n_neg, config.n_hard_max, neg_rng, config.hard_mining)
                            ret_terms.append(retrieval_loss(a, pool.matrix[rec.image_id], pool.matrix[negs], model.temperature()))
                            if reg is not None:
                                reg_terms.append(reg)
                            if model.predictor is not None and segments.shape[0] >= 2:
                                aux_terms.append(masked_segment_loss(segments, config.mask_prob, model.predictor, mask_rng))
                except DomainError as err:
                    # diverged parameters surface as non-finite op inputs
                    raise TrainingAborted(
                        f"non-finite values at epoch {epoch} step {global_step} ({err}); last good checkpoint: {last_checkpoint}",
                        last_checkpoint,
                    ) from err

                parts = []
                logged = {"loss_nfc": None, "loss_ret": None, "loss_reg": None, "loss_aux": None}
                if nfc_terms:
                    mean_nfc = _mean_scalars(nfc_terms)
                    parts.append(mean_nfc)
                    logged["loss_nfc"] = float(mean_nfc.item())
                if ret_terms:
                    mean_ret = _mean_scalars(ret_terms)
                    parts.append(mean_ret)
                    logged["loss_ret"] = float(mean_ret.item())
                if reg_terms and config.lam > 0:
                    mean_reg = _mean_scalars(reg_terms)
                    parts.append(ad.mul(mean_reg, Tensor(np.asarray(config.lam, dtype=mean_reg.data.dtype))))
                    logged["loss_reg"] = float(mean_reg.item())
                if aux_terms:
                    mean_aux = _mean_scalars(aux_terms)
                    parts.append(ad.mul(mean_aux, Tensor(np.asarray(config.aux_weight, dtype=mean_aux.data.dtype))))
                    logged["loss_aux"] = float(mean_aux.item())
                if not parts:
                    global_step += 1
                    continue
                total = parts[0]
                for p in parts[1:]:
                    total = ad.add(total, p)
                if not np.isfinite(total.item()):
                    raise TrainingAborted(
                        f"non-finite loss at epoch {epoch} step {global_step}; last good checkpoint: {last_checkpoint}",
                        last_checkpoint,
                    )
                ad.backward(total)
                optimizer.step(lr)
                metrics_file.write(json.dumps({"epoch": epoch, "step": global_step, **logged, "lr": lr}) + "\n")
                global_step += 1
            metrics_file.flush()

            last_checkpoint = save_checkpoint(
                out / f"checkpoint_ep{epoch:03d}.ckpt",
                checkpoint_meta(epoch),
                {**model_arrays(model), **optimizer.state_arrays()},
            )
            if val_ds is not None:
                report = _validation_recall(model, val_ds, config, val_rng)
                val_file.write(
                    json.dumps(
                        {
                            "epoch": epoch,
                            "r1_speech_to_image": report.speech_to_image[1],
                            "r5_speech_to_image": report.speech_to_image[5],
                            "r10_speech_to_image": report.speech_to_image[10],
                            "r1_image_to_speech": report.image_to_speech[1],
                            "r1_mean": report.mean[1],
                        }
                    )
                    + "\n"
                )
                val_file.flush()
    finally:
        metrics_file.close()
        if val_file:
            val_file.close()

    final = out / "checkpoint.ckpt"
    final.write_bytes(last_checkpoint.read_bytes())
    return FitResult(
        checkpoint_path=final,
        metrics_path=metrics_path,
        val_metrics_path=val_metrics_path,
        out_dir=out,
        epochs_run=config.epochs - start_epoch + 1,
        steps_run=global_step,
    )
