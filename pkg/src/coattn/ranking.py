"""Statement scoring and the max-margin ranking loss."""

from __future__ import annotations

import numpy as np

from .errors import LossDefinitionError
from .tensor import Tensor, as_tensor, cosine_similarity, hinge, linear_map, reshape, tsum

DEFAULT_MARGIN = 0.2


def score_statement(fused: Tensor, encoding: Tensor, P: Tensor) -> Tensor:
    """Cosine similarity between the projected fused embedding and a statement encoding.

    Leading axes broadcast, so ``fused`` of shape ``(B, D1)`` against
    ``encoding`` of shape ``(B, D_e)`` gives ``B`` scores.
    """
    return cosine_similarity(linear_map(fused, P), encoding)


def margin_rank_loss(scores_pos, scores_neg, margin: float = DEFAULT_MARGIN) -> Tensor:
    """``sum_j sum_l max(0, margin - S_j + S_l)`` over positives j and negatives l.

    The last axis indexes statements; any leading axes are summed over as
    independent samples.
    """
    for scores in (scores_pos, scores_neg):
        shape = scores.shape if isinstance(scores, Tensor) else np.shape(scores)
        if len(shape) == 0 or 0 in shape:
            raise LossDefinitionError("ranking loss needs at least one positive and one negative score")
    pos = as_tensor(scores_pos)
    neg = as_tensor(scores_neg)
    if pos.shape[:-1] != neg.shape[:-1]:
        raise LossDefinitionError(f"batch shapes differ: {pos.shape} vs {neg.shape}")
    lead = pos.shape[:-1]
    gap = reshape(neg, (*lead, 1, neg.shape[-1])) - reshape(pos, (*lead, pos.shape[-1], 1))
    return tsum(hinge(gap + Tensor(float(margin))))


def margin_rank_loss_value(scores_pos, scores_neg, margin: float = DEFAULT_MARGIN) -> float:
    return margin_rank_loss(np.asarray(scores_pos, float), np.asarray(scores_neg, float), margin).item()
