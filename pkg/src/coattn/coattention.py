"""Multihop co-attention between region proposals and symbols.

Each hop attends over proposals with the current symbol summary as the
query, then attends over symbols with the resulting image summary, scaling
the symbol weights by their image-level probabilities. The per-hop
projected image summaries and symbol summaries are summed into the fused
representation.

All functions accept an optional leading batch axis: features
``(..., N, D2)``, probabilities ``(..., K)``. Symbol embeddings ``(K, D1)``
and the projection ``W`` ``(D2, D1)`` are shared.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DegenerateProbabilityError, DimensionError, ValidationError
from .tensor import Tensor, as_tensor, linear_map, mask_fill, mean, softmax, tanh_elem, transpose

log = logging.getLogger(__name__)

DEFAULT_MAX_PROPOSALS = 70


@dataclass
class ProposalFeatures:
    """Region features ``(N, D2)`` and boxes ``(N, 4)`` as ``x, y, w, h``."""

    features: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DimensionError(f"proposal features must be (N, D2) with N >= 1, got {self.features.shape}")
        if self.boxes.shape != (self.features.shape[0], 4):
            raise DimensionError(f"boxes shape {self.boxes.shape} does not match {self.features.shape[0]} proposals")
        if (self.boxes[:, 2:] < 0).any():
            raise ValidationError("box width and height must be nonnegative")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class SymbolSet:
    """Symbol embeddings ``(K, D1)`` with per-image probabilities ``(K,)``."""

    embeddings: np.ndarray
    probabilities: np.ndarray
    names: list[str] | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise DimensionError(f"symbol embeddings must be (K, D1) with K >= 1, got {self.embeddings.shape}")
        if self.probabilities.shape != (self.embeddings.shape[0],):
            raise DimensionError(
                f"{self.probabilities.shape[0] if self.probabilities.ndim else 0} probabilities "
                f"for {self.embeddings.shape[0]} symbols"
            )
        if ((self.probabilities < 0) | (self.probabilities > 1)).any():
            raise ValidationError("symbol probabilities must lie in [0, 1]")

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class CoAttentionConfig:
    hops: int = 2
    weighted_init: bool = False
    suppression_enabled: bool = True
    suppression_ratio: float = 0.7
    suppression_value: float = -2.0
    max_proposals: int = DEFAULT_MAX_PROPOSALS

    def __post_init__(self):
        if self.hops < 1:
            raise ValidationError(f"hops must be a positive integer, got {self.hops}")
        if self.hops > 2:
            log.warning("hops=%d: more than two hops tends to overfit; proceeding", self.hops)

    def to_dict(self) -> dict:
        return {
            "hops": self.hops,
            "weighted_init": self.weighted_init,
            "suppression_enabled": self.suppression_enabled,
            "suppression_ratio": self.suppression_ratio,
            "suppression_value": self.suppression_value,
            "max_proposals": self.max_proposals,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoAttentionConfig":
        return cls(**d)


class ImageAttention(NamedTuple):
    alpha: Tensor
    summary: Tensor
    raw: Tensor
    scores: np.ndarray  # tanh scores before any suppression
    suppressed: np.ndarray


class SymbolAttention(NamedTuple):
    beta: Tensor
    summary: Tensor
    raw: Tensor
    projected_image: Tensor  # W^T b_hat


@dataclass
class HopTrace:
    raw_image: np.ndarray
    alpha: np.ndarray
    raw_symbol: np.ndarray
    beta: np.ndarray
    image_summary: np.ndarray
    symbol_summary: np.ndarray
    suppressed: np.ndarray
    scores: np.ndarray  # image scores before suppression


@dataclass
class AttentionTrace:
    initial_symbol_summary: np.ndarray
    hops: list[HopTrace] = field(default_factory=list)

    def select(self, b: int) -> "AttentionTrace":
        """The trace of batch element ``b``."""
        return AttentionTrace(
            self.initial_symbol_summary if self.initial_symbol_summary.ndim == 1 else self.initial_symbol_summary[b],
            [HopTrace(*(getattr(h, f)[b] for f in HopTrace.__dataclass_fields__)) for h in self.hops],
        )


def init_symbol_summary(embeddings, probabilities=None, weighted: bool = False) -> Tensor:
    """Initial symbol summary: the plain mean, or the probability-weighted mean."""
    Z = as_tensor(embeddings)
    if not weighted:
        return mean(Z, axis=0)
    p = np.asarray(probabilities, dtype=np.float64)
    total = p.sum(axis=-1, keepdims=True)
    if (total <= 0).any():
        raise DegenerateProbabilityError("weighted initialization needs at least one positive symbol probability")
    return linear_map(Tensor(p / total), transpose(Z))


def suppression_mask(raw_previous: np.ndarray, ratio: float) -> np.ndarray:
    prev = np.asarray(raw_previous, dtype=np.float64)
    return prev >= ratio * prev.max(axis=-1, keepdims=True)


def suppress_attention(raw_current, raw_previous, ratio: float = 0.7, value: float = -2.0) -> np.ndarray:
    """Overwrite scores of regions that scored ``>= ratio * max`` on the previous hop."""
    cur = np.asarray(raw_current, dtype=np.float64)
    prev = np.asarray(raw_previous, dtype=np.float64)
    if cur.shape != prev.shape:
        raise DimensionError(f"score shapes differ: {cur.shape} vs {prev.shape}")
    return np.where(suppression_mask(prev, ratio), float(value), cur)


def attend_image(
    s_hat: Tensor,
    features,
    W: Tensor,
    prev_scores: np.ndarray | None = None,
    config: CoAttentionConfig | None = None,
) -> ImageAttention:
    """Score proposals against the symbol summary and pool them.

    ``prev_scores`` are the previous hop's tanh scores; when given and
    suppression is enabled, regions that dominated that hop are pushed to
    ``suppression_value`` before the softmax.
    """
    config = config or CoAttentionConfig()
    Phi = as_tensor(features)
    query = linear_map(s_hat, W)  # W s_hat, so raw_i = phi_i . (W s_hat)
    raw = tanh_elem(linear_map(query, Phi))
    scores = raw.data
    suppressed = np.zeros(scores.shape, dtype=bool)
    if prev_scores is not None and config.suppression_enabled:
        suppressed = suppression_mask(prev_scores, config.suppression_ratio)
        raw = mask_fill(raw, suppressed, config.suppression_value)
    alpha = softmax(raw)
    summary = linear_map(alpha, transpose(Phi))
    return ImageAttention(alpha, summary, raw, scores, suppressed)


def attend_symbols(b_hat: Tensor, embeddings, probabilities, W: Tensor) -> SymbolAttention:
    """Attend over symbols with the image summary; weights are scaled by p_k after the softmax."""
    Z = as_tensor(embeddings)
    projected = linear_map(b_hat, transpose(W))
    raw = tanh_elem(linear_map(projected, Z))
    beta = softmax(raw)
    weights = beta * Tensor(np.asarray(probabilities, dtype=np.float64))
    summary = linear_map(weights, transpose(Z))
    return SymbolAttention(beta, summary, raw, projected)


def run_coattention(
    features,
    embeddings,
    probabilities,
    W: Tensor,
    config: CoAttentionConfig | None = None,
) -> tuple[Tensor, AttentionTrace]:
    """Alternate image and symbol attention for ``config.hops`` hops.

    Returns the fused representation ``sum_t (W^T b_t + s_t)`` and a trace of
    every intermediate.
    """
    config = config or CoAttentionConfig()
    Phi = as_tensor(features)
    Z = as_tensor(embeddings)
    p = np.asarray(probabilities, dtype=np.float64)
    if Phi.shape[-2] > config.max_proposals:
        raise ValidationError(f"{Phi.shape[-2]} proposals exceed the configured cap of {config.max_proposals}")
    if Phi.shape[-1] != W.shape[0] or Z.shape[-1] != W.shape[1] or p.shape[-1] != Z.shape[0]:
        raise DimensionError(
            f"inconsistent shapes: features {Phi.shape}, symbols {Z.shape}, probabilities {p.shape}, W {W.shape}"
        )

    s_hat = init_symbol_summary(Z, p, config.weighted_init)
    trace = AttentionTrace(s_hat.data)
    fused = None
    prev_scores = None
    for _ in range(config.hops):
        img = attend_image(s_hat, Phi, W, prev_scores, config)
        sym = attend_symbols(img.summary, Z, p, W)
        term = sym.projected_image + sym.summary
        fused = term if fused is None else fused + term
        trace.hops.append(
            HopTrace(
                img.raw.data, img.alpha.data, sym.raw.data, sym.beta.data,
                img.summary.data, sym.summary.data, img.suppressed, img.scores,
            )
        )
        prev_scores = img.scores
        s_hat = sym.summary
    return fused, trace


def coattend(proposals: ProposalFeatures, symbols: SymbolSet, W: Tensor, config: CoAttentionConfig | None = None):
    """:func:`run_coattention` for a single image given as typed containers."""
    return run_coattention(proposals.features, symbols.embeddings, symbols.probabilities, W, config)
