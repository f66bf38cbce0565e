"""Adam training loop, negative sampling and checkpoint files."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .coattention import CoAttentionConfig
from .dataset import AdSample, DatasetManifest
from .encoder import PAD, Vocabulary
from .errors import CheckpointError, CoAttnError, SamplingError, TrainingError, ValidationError
from .model import ModelConfig, as_tensors, batch_loss, coattention_config_for, get_variant, init_params
from .tensor import gradients

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "coattn-checkpoint/1"
DEFAULT_LR = 5e-4
CLIP_THRESHOLD = 5.0


@dataclass
class AdamState:
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched.

    Coordinates whose gradient is exactly zero in this step keep their value
    (their moments still decay).
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    step = state.step + 1
    bc1 = 1.0 - state.beta1**step
    bc2 = 1.0 - state.beta2**step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_params[name] = np.where(g != 0.0, p - update, p)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps, step, new_m, new_v)


def clip_gradients(grads: dict[str, np.ndarray], threshold: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= threshold:
        return grads
    return {k: g * (threshold / total) for k, g in grads.items()}


# ---------------------------------------------------------------------------
# negative sampling


class NegativePool:
    """Statements available as negatives, indexed by topic."""

    def __init__(self, manifest: DatasetManifest, samples: Sequence[AdSample] | None = None):
        samples = manifest.samples if samples is None else samples
        by_topic: dict[int, set[int]] = {}
        for s in samples:
            by_topic.setdefault(s.topic_id, set()).update(s.related_statement_ids)
        self.by_topic = {t: sorted(ids) for t, ids in by_topic.items()}
        self.all_ids = sorted(set().union(*by_topic.values())) if by_topic else []


def sample_negatives(
    sample: AdSample,
    pool: NegativePool | DatasetManifest,
    n: int,
    rng: np.random.Generator,
) -> list[int]:
    """``n`` distinct statement ids outside the sample's related set.

    Same-topic statements come first; the global pool backfills when the
    topic runs out.
    """
    if isinstance(pool, DatasetManifest):
        pool = NegativePool(pool)
    related = set(sample.related_statement_ids)
    same = [i for i in pool.by_topic.get(sample.topic_id, []) if i not in related]
    if len(same) >= n:
        return [same[i] for i in rng.choice(len(same), size=n, replace=False)]
    taken = set(same)
    rest = [i for i in pool.all_ids if i not in related and i not in taken]
    if len(same) + len(rest) < n:
        raise SamplingError(f"only {len(same) + len(rest)} negatives available for image {sample.image_id}, need {n}")
    return same + [rest[i] for i in rng.choice(len(rest), size=n - len(same), replace=False)]


# ---------------------------------------------------------------------------
# configuration and checkpoints


@dataclass
class TrainConfig:
    variant: str = "VSE-CoAtt-2"
    epochs: int = 40
    batch_size: int = 16
    negatives_per_positive: int = 8
    margin: float = 0.2
    learning_rate: float = DEFAULT_LR
    seed: int = 0
    hops: int | None = None
    suppression: bool = True
    suppression_ratio: float = 0.7
    suppression_value: float = -2.0
    d_w: int = 32
    d_e: int = 32
    statement_pooling: str = "last"
    checkpoint_interval: int = 0
    clip_gradients: bool = False

    def validate(self) -> None:
        get_variant(self.variant)
        for name in ("epochs", "batch_size", "negatives_per_positive", "d_w", "d_e"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hops is not None and self.hops < 1:
            raise ValidationError(f"hops must be positive, got {self.hops}")
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be positive")
        if self.checkpoint_interval < 0:
            raise ValidationError("checkpoint interval must be nonnegative")

    def coattention(self) -> CoAttentionConfig:
        base = CoAttentionConfig(
            suppression_enabled=self.suppression,
            suppression_ratio=self.suppression_ratio,
            suppression_value=self.suppression_value,
        )
        return coattention_config_for(get_variant(self.variant), base, self.hops)

    def model_config(self, manifest: DatasetManifest) -> ModelConfig:
        return ModelConfig(
            self.variant, manifest.d1, manifest.d2, len(manifest.vocabulary()),
            self.d_w, self.d_e, self.statement_pooling, self.coattention(),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    model: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    train: TrainConfig
    vocabulary: Vocabulary
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    train_image_ids: list[str] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.train.seed


def _encode_array(arr: np.ndarray, encoding: str) -> dict:
    flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
    if encoding == "base64":
        data = base64.b64encode(flat.tobytes()).decode("ascii")
    elif encoding == "hex":
        data = [float(x).hex() for x in flat]
    else:
        raise ValidationError(f"unknown array encoding {encoding!r}")
    return {"shape": list(arr.shape), "data": data}


def _decode_array(obj: dict, encoding: str) -> np.ndarray:
    shape = tuple(obj["shape"])
    if encoding == "base64":
        flat = np.frombuffer(base64.b64decode(obj["data"]), dtype="<f8")
    else:
        flat = np.array([float.fromhex(x) for x in obj["data"]], dtype=np.float64)
    if flat.size != int(np.prod(shape)):
        raise CheckpointError(f"array payload of {flat.size} values does not fit shape {shape}")
    return flat.astype(np.float64).reshape(shape)


def checkpoint_to_json(ckpt: Checkpoint, encoding: str = "base64") -> str:
    def arrays(d):
        return {k: _encode_array(d[k], encoding) for k in sorted(d)}

    doc = {
        "format": CHECKPOINT_FORMAT,
        "array_encoding": encoding,
        "variant": ckpt.model.variant,
        "seed": ckpt.seed,
        "dims": {
            "d1": ckpt.model.d1, "d2": ckpt.model.d2, "d_w": ckpt.model.d_w,
            "d_e": ckpt.model.d_e, "vocab_size": ckpt.model.vocab_size,
        },
        "model": ckpt.model.to_dict(),
        "train_config": ckpt.train.to_dict(),
        "config_hash": ckpt.train.digest(),
        "epoch": ckpt.epoch,
        "step": ckpt.adam.step,
        "loss_history": [float(x) for x in ckpt.loss_history],
        "vocabulary_hash": ckpt.vocabulary.digest(),
        "vocabulary": ckpt.vocabulary.id_to_token,
        "train_image_ids": list(ckpt.train_image_ids),
        "adam": {
            "lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps,
            "m": arrays(ckpt.adam.m), "v": arrays(ckpt.adam.v),
        },
        "params": arrays(ckpt.params),
    }
    return json.dumps(doc, indent=1) + "\n"


def checkpoint_from_json(text: str) -> Checkpoint:
    try:
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"not a checkpoint file (format {doc.get('format')!r})")
        enc = doc["array_encoding"]
        vocab = Vocabulary({tok: i for i, tok in enumerate(doc["vocabulary"])})
        if vocab.digest() != doc["vocabulary_hash"]:
            raise CheckpointError("vocabulary hash mismatch")
        a = doc["adam"]
        adam = AdamState(
            a["lr"], a["beta1"], a["beta2"], a["eps"], doc["step"],
            {k: _decode_array(v, enc) for k, v in a["m"].items()},
            {k: _decode_array(v, enc) for k, v in a["v"].items()},
        )
        return Checkpoint(
            ModelConfig.from_dict(doc["model"]),
            {k: _decode_array(v, enc) for k, v in doc["params"].items()},
            adam,
            TrainConfig(**doc["train_config"]),
            vocab,
            doc["epoch"],
            list(doc["loss_history"]),
            list(doc["train_image_ids"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CoAttnError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc!r}") from exc


def save_checkpoint(ckpt: Checkpoint, path: str | Path, encoding: str = "base64") -> None:
    Path(path).write_text(checkpoint_to_json(ckpt, encoding))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from exc
    return checkpoint_from_json(text)


def check_compatible(ckpt: Checkpoint, manifest: DatasetManifest) -> None:
    """Raise unless the checkpoint was built for this corpus's dims and vocabulary."""
    if (ckpt.model.d1, ckpt.model.d2) != (manifest.d1, manifest.d2):
        raise ValidationError(
            f"checkpoint dims (d1={ckpt.model.d1}, d2={ckpt.model.d2}) do not match "
            f"dataset dims (d1={manifest.d1}, d2={manifest.d2})"
        )
    if ckpt.vocabulary.digest() != manifest.vocabulary().digest():
        raise ValidationError("checkpoint vocabulary does not match the dataset's statements")


# ---------------------------------------------------------------------------
# training


def statement_token_ids(manifest: DatasetManifest, vocab: Vocabulary) -> dict[int, list[int]]:
    return {sid: vocab.encode(toks) for sid, toks in manifest.statements.items()}


def init_checkpoint(manifest: DatasetManifest, config: TrainConfig, train_ids: Sequence[str]) -> Checkpoint:
    config.validate()
    model = config.model_config(manifest)
    params = init_params(model, np.random.default_rng(config.seed))
    return Checkpoint(model, params, AdamState(lr=config.learning_rate), config, manifest.vocabulary(),
                      0, [], list(train_ids))


def train(
    manifest: DatasetManifest,
    config: TrainConfig,
    train_ids: Sequence[str] | None = None,
    resume: Checkpoint | None = None,
    checkpoint_path: str | Path | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
    stop_after: int | None = None,
) -> Checkpoint:
    """Optimize every parameter against the ranking loss.

    Each epoch shuffles the training images with a generator seeded by
    ``(seed, epoch)``, so a run resumed from an epoch checkpoint follows the
    same trajectory as an unbroken one. Per image, one related statement is
    drawn as the positive plus ``negatives_per_positive`` negatives; one Adam
    step is taken per batch. ``stop_after`` ends the run early after that
    many total epochs (for resume testing).
    """
    if train_ids is None:
        train_ids = [s.image_id for s in manifest.samples]
    ckpt = resume or init_checkpoint(manifest, config, train_ids)
    config = ckpt.train
    check_compatible(ckpt, manifest)
    index = manifest.sample_index()
    try:
        train_samples = [manifest.samples[index[i]] for i in ckpt.train_image_ids]
    except KeyError as exc:
        raise ValidationError(f"unknown training image id {exc.args[0]!r}") from None
    pool = NegativePool(manifest, train_samples)
    tokens = statement_token_ids(manifest, ckpt.vocabulary)
    Z = manifest.symbol_embeddings
    params, state = ckpt.params, ckpt.adam
    history = list(ckpt.loss_history)
    last_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)

    for epoch in range(ckpt.epoch, last_epoch):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train_samples))
        total, counted = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[start : start + config.batch_size]]
            try:
                pos, neg = [], []
                for s in batch:
                    pos.append([tokens[s.related_statement_ids[int(rng.integers(len(s.related_statement_ids)))]]])
                    neg.append([tokens[i] for i in sample_negatives(s, pool, config.negatives_per_positive, rng)])
                tparams = as_tensors(params, requires_grad=True)
                loss, dropped = batch_loss(tparams, ckpt.model, batch, Z, pos, neg, config.margin)
                for b in dropped:
                    log.warning("epoch %d: skipped image %s (degenerate embedding)", epoch, batch[b].image_id)
                if loss is None:
                    continue
                grads = gradients(loss, tparams)
                grads["word_embeddings"][PAD] = 0.0
                if config.clip_gradients:
                    grads = clip_gradients(grads, CLIP_THRESHOLD)
                params, state = adam_step(params, grads, state)
            except CoAttnError as exc:
                ids = ", ".join(s.image_id for s in batch)
                raise TrainingError(f"epoch {epoch}, batch with images [{ids}]: {exc}") from exc
            total += loss.item()
            counted += len(batch) - len(dropped)
        epoch_loss = total / max(counted, 1)
        history.append(epoch_loss)
        log.info("epoch %d loss %.6f", epoch, epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
        ckpt = Checkpoint(ckpt.model, params, state, config, ckpt.vocabulary, epoch + 1, history, ckpt.train_image_ids)
        if checkpoint_path and config.checkpoint_interval and (epoch + 1) % config.checkpoint_interval == 0:
            p = Path(checkpoint_path)
            save_checkpoint(ckpt, p.with_name(f"{p.stem}.epoch{epoch + 1}{p.suffix}"))
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt
