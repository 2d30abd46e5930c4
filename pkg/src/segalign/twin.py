"""Audio-only twin-branch training.

One shared segmental encoder feeds two frozen text encoders; the right
branch gets a trainable projection so the two frozen spaces may have
different native dimensions.  Semantically paired utterances (captions of
the same image) are aligned contrastively: the left output must pick its
paired right output among the other in-batch right outputs, so the negative
count is tied to the batch size (audio encoders evolve, ruling out the
decoupled pool).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .alignment import FrozenTextEncoder
from .archive import Dataset, UtteranceRecord
from .autodiff import Tensor
from .config import TrainConfig
from .encoder import EncoderConfig, EncoderParams, detect_boundaries, encode_frames, encode_segments, next_frame_loss, pool_segments
from .errors import ConfigError, DomainError, ValidationError
from .evaluation import semantic_audio_retrieval
from .losses import contrastive_from_logits
from .rng import StreamSet
from .trainer import Adam, TrainingAborted, _mean_scalars, active_losses, load_checkpoint, save_checkpoint

LEFT_ENCODER_SEED_OFFSET = 101
RIGHT_ENCODER_SEED_OFFSET = 202


class TwinModel:
    """Shared segmental encoder with left/right frozen branches."""

    def __init__(self, config: TrainConfig, frame_dim: int, init_rng: np.random.Generator, left_seed: int | None = None, right_seed: int | None = None, dtype=np.float32):
        config.validate()
        self.config = config
        self.frame_dim = frame_dim
        self.left_dim = config.out_dim
        self.right_dim = config.twin_right_dim or config.out_dim
        self.joint_dim = config.twin_joint_dim or config.out_dim
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
        self.left_encoder = FrozenTextEncoder(
            seed=config.seed + LEFT_ENCODER_SEED_OFFSET if left_seed is None else left_seed,
            input_dim=self.left_dim,
            joint_dim=self.joint_dim,
            max_positions=config.max_segments,
            normalize_input=config.normalize_segments,
            dtype=dtype,
        )
        self.right_encoder = FrozenTextEncoder(
            seed=config.seed + RIGHT_ENCODER_SEED_OFFSET if right_seed is None else right_seed,
            input_dim=self.right_dim,
            joint_dim=self.joint_dim,
            max_positions=config.max_segments,
            normalize_input=config.normalize_segments,
            dtype=dtype,
        )
        self._proj_params: dict[str, Tensor] = {}
        if config.twin_identity_projection:
            if self.right_dim != config.out_dim:
                raise ConfigError(f"identity projection needs right_dim == out_dim, got {self.right_dim} vs {config.out_dim}")
        else:
            hidden = config.out_dim

            def mat(name, fan_in, fan_out):
                self._proj_params[f"twin.proj.{name}.w"] = Tensor((init_rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(dtype), requires_grad=True)
                self._proj_params[f"twin.proj.{name}.b"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)

            mat("l1", config.out_dim, hidden)
            mat("l2", hidden, self.right_dim)

    def trainable(self) -> dict[str, Tensor]:
        return {**self.encoder.parameters(), **self._proj_params}

    def _project_right(self, segments: Tensor) -> Tensor:
        if not self._proj_params:
            return segments
        x = ad.relu(ad.add_rowvec(ad.matmul(segments, self._proj_params["twin.proj.l1.w"]), self._proj_params["twin.proj.l1.b"]))
        return ad.add_rowvec(ad.matmul(x, self._proj_params["twin.proj.l2.w"]), self._proj_params["twin.proj.l2.b"])

    def _segments(self, frames: np.ndarray) -> Tensor:
        encoded = encode_frames(frames, self.encoder)
        starts = detect_boundaries(encoded.numpy(), self.config.boundary_threshold, self.config.max_segments)
        return encode_segments(pool_segments(encoded, starts), self.encoder)

    def branch_left(self, frames: np.ndarray) -> Tensor:
        return self.left_encoder.encode(self._segments(frames))

    def branch_right(self, frames: np.ndarray) -> Tensor:
        return self.right_encoder.encode(self._project_right(self._segments(frames)))

    def forward_pair(self, frames_left: np.ndarray, frames_right: np.ndarray) -> tuple[Tensor, Tensor]:
        """Joint-space outputs of the two branches for one utterance pair."""
        if self.left_encoder.joint_dim != self.right_encoder.joint_dim:
            raise ConfigError("twin branches map to different joint dimensions")
        return self.branch_left(frames_left), self.branch_right(frames_right)

    def extract_features(self, frames: np.ndarray, branch: str = "right") -> np.ndarray:
        """Downstream features: native left (d_l), native right (d_r), or
        their concatenation in (right, left) order."""
        with ad.no_grad():
            if branch == "left":
                return self.left_encoder.encode_native(self._segments(frames)).numpy()
            if branch == "right":
                return self.right_encoder.encode_native(self._project_right(self._segments(frames))).numpy()
            if branch == "concat":
                left = self.left_encoder.encode_native(self._segments(frames)).numpy()
                right = self.right_encoder.encode_native(self._project_right(self._segments(frames))).numpy()
                return np.concatenate([right, left])
        raise ConfigError(f"unknown branch {branch!r} (expected left, right, or concat)")

    def frozen_digest(self) -> str:
        import hashlib

        h = hashlib.sha256(self.left_encoder.weight_digest())
        h.update(self.right_encoder.weight_digest())
        return h.hexdigest()


def twin_contrastive_loss(left_embs: list[Tensor], right_embs: list[Tensor], temperature: float, symmetric: bool = False) -> Tensor:
    """Mean over the batch of -log softmax of the paired similarity; the
    other in-batch right outputs are the negatives."""
    B = len(left_embs)
    if B < 2 or len(right_embs) != B:
        raise DomainError(f"twin_contrastive_loss: need matched batches of size >= 2, got {len(left_embs)} and {len(right_embs)}")
    dtype = left_embs[0].data.dtype
    lmat = ad.concat([ad.reshape(t, (1, t.shape[0])) for t in left_embs], axis=0)
    rmat = ad.concat([ad.reshape(t, (1, t.shape[0])) for t in right_embs], axis=0)
    sims = ad.mul(ad.matmul(lmat, ad.transpose(rmat)), Tensor(np.asarray(1.0 / temperature, dtype=dtype)))

    def direction(sim_matrix):
        rows = []
        for i in range(B):
            others = np.delete(np.arange(B), i)
            rows.append(np.concatenate(([i * B + i], i * B + others)))
        idx = np.stack(rows)
        logits = ad.reshape(ad.gather_flat(sim_matrix, idx.reshape(-1)), idx.shape)
        return contrastive_from_logits(logits)

    loss = direction(sims)
    if symmetric:
        loss = ad.mul(ad.add(loss, direction(ad.transpose(sims))), Tensor(np.asarray(0.5, dtype=dtype)))
    return loss


def caption_pairs_by_image(utterances: list[UtteranceRecord]) -> dict[int, list[UtteranceRecord]]:
    by_image: dict[int, list[UtteranceRecord]] = {}
    for u in utterances:
        if u.image_id >= 0:
            by_image.setdefault(u.image_id, []).append(u)
    return by_image


def designated_candidates(utterances: list[UtteranceRecord]) -> tuple[list[UtteranceRecord], list[UtteranceRecord]]:
    """First caption of each image is the retrieval candidate; the rest query."""
    by_image = caption_pairs_by_image(utterances)
    candidates, queries = [], []
    for image_id in sorted(by_image):
        caps = by_image[image_id]
        candidates.append(caps[0])
        queries.extend(caps[1:])
    return candidates, queries


@dataclass
class TwinFitResult:
    checkpoint_path: Path
    metrics_path: Path
    val_metrics_path: Path | None
    out_dir: Path
    steps_run: int


def twin_semantic_recall(model: TwinModel, dataset: Dataset, ks=(1, 5, 10), branch: str = "right") -> dict[int, float]:
    """Semantic audio retrieval using one designated caption per image."""
    candidates, queries = designated_candidates(dataset.utterances)
    if not queries:
        raise ValidationError("semantic retrieval needs images with at least 2 captions")
    cand_embs = np.stack([model.extract_features(dataset.utterance_frames(u), branch) for u in candidates])
    query_embs = np.stack([model.extract_features(dataset.utterance_frames(u), branch) for u in queries])
    return semantic_audio_retrieval(
        query_embs,
        cand_embs,
        np.array([u.image_id for u in queries]),
        np.array([u.image_id for u in candidates]),
        ks=ks,
    )


def fit_audio_only(train_data, config: TrainConfig, out_dir: str | Path, val_data=None) -> TwinFitResult:
    """Train the twin-branch model on caption pairs of the same image."""
    from .trainer import _as_dataset

    config.validate()
    train_ds = _as_dataset(train_data)
    val_ds = _as_dataset(val_data) if val_data is not None else None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    streams = StreamSet(config.seed)
    model = TwinModel(config, train_ds.manifest.frame_dim, streams.get("init"))
    optimizer = Adam(model.trainable())

    by_image = caption_pairs_by_image(train_ds.utterances)
    multi = {img: caps for img, caps in by_image.items() if len(caps) >= 2}
    if len(multi) < 2:
        raise ValidationError("twin training needs at least 2 images with 2+ captions")

    pair_rng = streams.get("twin_pairs")
    data_rng = streams.get("data")
    nfc_rng = streams.get("nfc")

    metrics_path = out / "train_metrics.jsonl"
    val_metrics_path = out / "val_metrics.jsonl" if val_ds is not None else None
    metrics_file = open(metrics_path, "w", encoding="utf-8")
    val_file = open(val_metrics_path, "w", encoding="utf-8") if val_metrics_path else None

    global_step = 0
    last_checkpoint: Path | None = None
    image_ids = sorted(multi)
    nfc_k = config.nfc_negatives

    try:
        for epoch in range(1, config.epochs + 1):
            lr = config.lr_at_epoch(epoch)
            pairs = []
            for img in image_ids:
                caps = multi[img]
                i, j = pair_rng.choice(len(caps), size=2, replace=False)
                pairs.append((caps[i], caps[j]))
            order = data_rng.permutation(len(pairs))
            for lo in range(0, len(order), config.batch_size):
                batch = [pairs[i] for i in order[lo : lo + config.batch_size]]
                if len(batch) < 2:
                    continue  # twin loss needs at least 2 in-batch pairs
                active = active_losses(global_step, epoch, config.nfc_warmup_steps)
                nfc_terms: list[Tensor] = []
                lefts: list[Tensor] = []
                rights: list[Tensor] = []
                try:
                    for rec_l, rec_r in batch:
                        frames_l = train_ds.utterance_frames(rec_l)
                        frames_r = train_ds.utterance_frames(rec_r)
                        if "nfc" in active:
                            for frames in (frames_l, frames_r):
                                if frames.shape[0] >= nfc_k + 2:
                                    nfc_terms.append(next_frame_loss(encode_frames(frames, model.encoder), nfc_k, nfc_rng))
                        if "ret" in active:
                            a_left, b_right = model.forward_pair(frames_l, frames_r)
                            lefts.append(a_left)
                            rights.append(b_right)
                except DomainError as err:
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
                if lefts:
                    twin_loss = twin_contrastive_loss(lefts, rights, config.tau_ret, config.twin_symmetric)
                    parts.append(twin_loss)
                    logged["loss_ret"] = float(twin_loss.item())
                if not parts:
                    global_step += 1
                    continue
                total = parts[0]
                for p in parts[1:]:
                    total = ad.add(total, p)
                if not np.isfinite(total.item()):
                    raise TrainingAborted(
                        f"non-finite twin loss at epoch {epoch} step {global_step}; last good checkpoint: {last_checkpoint}",
                        last_checkpoint,
                    )
                ad.backward(total)
                optimizer.step(lr)
                metrics_file.write(json.dumps({"epoch": epoch, "step": global_step, **logged, "lr": lr}) + "\n")
                global_step += 1
            metrics_file.flush()

            arrays = {name: t.data for name, t in model.trainable().items()}
            last_checkpoint = save_checkpoint(
                out / f"checkpoint_ep{epoch:03d}.ckpt",
                {
                    "format": 1,
                    "mode": "twin",
                    "config": config.to_dict(),
                    "epoch": epoch,
                    "step": global_step,
                    "frame_dim": train_ds.manifest.frame_dim,
                    "optimizer_t": optimizer.t,
                    "rng_state": streams.state(),
                    "frozen_digest": model.frozen_digest(),
                },
                {**arrays, **optimizer.state_arrays()},
            )
            if val_ds is not None:
                recall = twin_semantic_recall(model, val_ds)
                val_file.write(json.dumps({"epoch": epoch, **{f"r{k}": v for k, v in sorted(recall.items())}}) + "\n")
                val_file.flush()
    finally:
        metrics_file.close()
        if val_file:
            val_file.close()

    final = out / "checkpoint.ckpt"
    final.write_bytes(last_checkpoint.read_bytes())
    return TwinFitResult(checkpoint_path=final, metrics_path=metrics_path, val_metrics_path=val_metrics_path, out_dir=out, steps_run=global_step)


def twin_model_from_checkpoint(path: str | Path, dataset: Dataset) -> TwinModel:
    meta, arrays = load_checkpoint(path)
    if meta.get("mode") != "twin":
        raise ValidationError(f"{path}: not a twin checkpoint (mode={meta.get('mode')!r})")
    config = TrainConfig.from_dict(meta["config"])
    if dataset.manifest.frame_dim != meta["frame_dim"]:
        raise ValidationError(f"archive frame_dim {dataset.manifest.frame_dim} != checkpoint frame_dim {meta['frame_dim']}")
    streams = StreamSet(config.seed)
    model = TwinModel(config, meta["frame_dim"], streams.get("init"))
    for name, t in model.trainable().items():
        if name not in arrays:
            raise ValidationError(f"checkpoint missing tensor {name!r}")
        t.data = np.asarray(arrays[name], dtype=t.data.dtype).reshape(t.data.shape).copy()
    return model
