"""Model variants, parameter initialization and batched forward paths.

Every variant shares the statement encoder and the joint projection ``P``;
they differ in how an image (and, for co-attention, its symbols) is reduced
to a ``D1`` vector before projection:

==============  =========================================================
VSE             box-area weighted mean of proposal features, through W^T
VSE-P           plain mean of proposal features, through W^T
VSE-P-Att       attention over proposals with a learned query ``q``
VSE-CoAtt(-2)   one (two) hop co-attention with symbols
*-wt            co-attention with probability-weighted initialization
==============  =========================================================
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .coattention import AttentionTrace, CoAttentionConfig, run_coattention
from .encoder import POOLINGS, encode_statements, init_encoder_params, lstm_params
from .errors import DegenerateVectorError, ValidationError
from .ranking import margin_rank_loss
from .tensor import NORM_EPS, Tensor, concat, cosine_similarity, linear_map, reshape, softmax, take, tanh_elem, transpose


@dataclass(frozen=True)
class ModelVariant:
    id: str
    pooling: str  # "area", "mean", "attention" or "coattention"
    hops: int = 0
    weighted_init: bool = False

    @property
    def uses_proposals(self) -> bool:
        return self.pooling != "area"

    @property
    def uses_attention(self) -> bool:
        return self.pooling in ("attention", "coattention")

    @property
    def uses_coattention(self) -> bool:
        return self.pooling == "coattention"


VARIANTS: dict[str, ModelVariant] = {
    v.id: v
    for v in (
        ModelVariant("VSE", "area"),
        ModelVariant("VSE-P", "mean"),
        ModelVariant("VSE-P-Att", "attention"),
        ModelVariant("VSE-CoAtt", "coattention", hops=1),
        ModelVariant("VSE-CoAtt-2", "coattention", hops=2),
        ModelVariant("VSE-CoAtt-wt", "coattention", hops=1, weighted_init=True),
        ModelVariant("VSE-CoAtt-2-wt", "coattention", hops=2, weighted_init=True),
    )
}


def get_variant(variant_id: str) -> ModelVariant:
    try:
        return VARIANTS[variant_id]
    except KeyError:
        raise ValidationError(f"unknown variant {variant_id!r}; choose from {', '.join(VARIANTS)}") from None


@dataclass
class ModelConfig:
    variant: str
    d1: int
    d2: int
    vocab_size: int
    d_w: int = 32
    d_e: int = 32
    statement_pooling: str = "last"
    coattention: CoAttentionConfig = field(default_factory=CoAttentionConfig)

    def __post_init__(self):
        get_variant(self.variant)
        if self.statement_pooling not in POOLINGS:
            raise ValidationError(f"statement_pooling must be one of {POOLINGS}")

    @property
    def spec(self) -> ModelVariant:
        return get_variant(self.variant)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "d1": self.d1,
            "d2": self.d2,
            "vocab_size": self.vocab_size,
            "d_w": self.d_w,
            "d_e": self.d_e,
            "statement_pooling": self.statement_pooling,
            "coattention": self.coattention.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["coattention"] = CoAttentionConfig.from_dict(d["coattention"])
        return cls(**d)


def coattention_config_for(variant: ModelVariant, base: CoAttentionConfig | None = None, hops: int | None = None):
    """The co-attention settings implied by a variant, keeping suppression knobs from ``base``."""
    base = base or CoAttentionConfig()
    return CoAttentionConfig(
        hops=hops if hops is not None else (variant.hops or base.hops),
        weighted_init=variant.weighted_init,
        suppression_enabled=base.suppression_enabled,
        suppression_ratio=base.suppression_ratio,
        suppression_value=base.suppression_value,
        max_proposals=base.max_proposals,
    )


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d1, d2, d_e = config.d1, config.d2, config.d_e
    params = {
        # small W so the fused vector starts out dominated by the symbol summary
        "W": rng.normal(0.0, 0.1 / np.sqrt(d1 + d2), size=(d2, d1)),
        "P": rng.normal(0.0, np.sqrt(2.0 / (d1 + d_e)), size=(d_e, d1)),
    }
    if config.spec.pooling == "attention":
        params["q"] = rng.normal(0.0, np.sqrt(1.0 / d1), size=d1)
    params.update(init_encoder_params(config.vocab_size, config.d_w, config.d_e, rng))
    return params


def as_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


@dataclass
class ImageBatch:
    """Images stacked as ``features (B, N, D2)``, ``boxes (B, N, 4)``, ``probs (B, K)``."""

    features: np.ndarray
    boxes: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence) -> "ImageBatch":
        return cls(
            np.stack([s.features for s in samples]),
            np.stack([s.boxes for s in samples]),
            np.stack([s.symbol_probs for s in samples]),
        )


def _pooling_weights(batch: ImageBatch, pooling: str) -> np.ndarray:
    n = batch.features.shape[1]
    if pooling == "mean":
        return np.full(batch.features.shape[:2], 1.0 / n)
    area = batch.boxes[..., 2] * batch.boxes[..., 3]
    total = area.sum(axis=1, keepdims=True)
    return np.where(total > 0, area / np.where(total > 0, total, 1.0), 1.0 / n)


def fuse_images(
    params: Mapping[str, Tensor],
    config: ModelConfig,
    batch: ImageBatch,
    symbol_embeddings: np.ndarray,
) -> tuple[Tensor, AttentionTrace | dict | None]:
    """The ``(B, D1)`` image representation for one same-N batch, plus attention info."""
    variant = config.spec
    W = params["W"]
    Phi = Tensor(batch.features)
    if variant.pooling in ("area", "mean"):
        pooled = linear_map(Tensor(_pooling_weights(batch, variant.pooling)), transpose(Phi))
        return linear_map(pooled, transpose(W)), None
    if variant.pooling == "attention":
        raw = tanh_elem(linear_map(linear_map(params["q"], W), Phi))
        alpha = softmax(raw)
        summary = linear_map(alpha, transpose(Phi))
        return linear_map(summary, transpose(W)), {"raw_image": raw.data, "alpha": alpha.data}
    return run_coattention(Phi, symbol_embeddings, batch.probs, W, config.coattention)


def image_embeddings(
    params: Mapping[str, Tensor],
    config: ModelConfig,
    samples: Sequence,
    symbol_embeddings: np.ndarray,
) -> Tensor:
    """Projected image representations ``P f`` of shape ``(B, D_e)``.

    Samples with different proposal counts are processed in groups and
    reassembled in input order.
    """
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.features.shape[0], []).append(i)
    parts, order = [], []
    for idx in groups.values():
        fused, _ = fuse_images(params, config, ImageBatch.from_samples([samples[i] for i in idx]), symbol_embeddings)
        parts.append(fused)
        order.extend(idx)
    fused = parts[0] if len(parts) == 1 else take(concat(parts), np.argsort(order, kind="stable"))
    return linear_map(fused, params["P"])


def statement_encodings(params: Mapping[str, Tensor], config: ModelConfig, token_ids: Sequence[Sequence[int]]) -> Tensor:
    return encode_statements(token_ids, params["word_embeddings"], lstm_params(params), config.statement_pooling)


def _degenerate_rows(x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(x, axis=-1) <= NORM_EPS


def batch_loss(
    params: Mapping[str, Tensor],
    config: ModelConfig,
    samples: Sequence,
    symbol_embeddings: np.ndarray,
    positives: Sequence[Sequence[int]],
    negatives: Sequence[Sequence[int]],
    margin: float,
) -> tuple[Tensor | None, list[int]]:
    """Summed ranking loss over a batch.

    ``positives[b]`` and ``negatives[b]`` hold token-id sequences for sample
    ``b``; every sample must have the same counts. Samples whose image or
    statement embeddings are degenerate are dropped and reported in the
    second return value; the loss is ``None`` if nothing remains.
    """
    n_pos, n_neg = len(positives[0]), len(negatives[0])
    if any(len(p) != n_pos for p in positives) or any(len(n) != n_neg for n in negatives):
        raise ValidationError("every sample in a batch needs the same number of positives and negatives")
    per = n_pos + n_neg
    img = image_embeddings(params, config, samples, symbol_embeddings)
    seqs = [seq for b in range(len(samples)) for seq in (*positives[b], *negatives[b])]
    psi = statement_encodings(params, config, seqs)

    bad_img = _degenerate_rows(img.data)
    bad_stmt = _degenerate_rows(psi.data).reshape(len(samples), per).any(axis=1)
    dropped = np.flatnonzero(bad_img | bad_stmt).tolist()
    keep = [b for b in range(len(samples)) if b not in set(dropped)]
    if not keep:
        return None, dropped
    pair_img = np.repeat(keep, per)
    pair_stmt = np.concatenate([np.arange(b * per, (b + 1) * per) for b in keep])
    if not dropped:
        scores = cosine_similarity(take(img, pair_img), psi)
    else:
        scores = cosine_similarity(take(img, pair_img), take(psi, pair_stmt))
    scores = reshape(scores, (len(keep), per))
    return margin_rank_loss(scores[:, :n_pos], scores[:, n_pos:], margin), dropped


def score_candidates(
    params: Mapping[str, Tensor],
    config: ModelConfig,
    sample,
    symbol_embeddings: np.ndarray,
    encodings: np.ndarray,
) -> np.ndarray:
    """Cosine scores of one image against precomputed statement encodings ``(S, D_e)``."""
    img = image_embeddings(params, config, [sample], symbol_embeddings).data[0]
    if _degenerate_rows(img) or _degenerate_rows(encodings).any():
        raise DegenerateVectorError(f"degenerate embedding while scoring image {getattr(sample, 'image_id', '?')}")
    return (encodings @ img) / (np.linalg.norm(encodings, axis=1) * np.linalg.norm(img))
