"""End-to-end finite-difference check of every trainable parameter.

Builds a small random problem (images, symbols, statements) and checks the
gradient of the ranking loss with respect to each model parameter.
Instances that sit within ``KINK_GAP`` of a hinge kink or of the
suppression threshold are redrawn, since the loss is not differentiable
there.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .coattention import CoAttentionConfig
from .dataset import AdSample
from .errors import ValidationError
from .model import (
    ImageBatch, ModelConfig, as_tensors, batch_loss, coattention_config_for, fuse_images, get_variant,
    image_embeddings, init_params, statement_encodings,
)
from .tensor import GradCheckReport, check_gradients

KINK_GAP = 1e-4
MAX_REDRAWS = 50


@dataclass
class GradCheckDims:
    d1: int = 8
    d2: int = 12
    d_e: int = 8
    d_w: int = 8
    n: int = 5
    k: int = 4
    hops: int = 2
    vocab: int = 12
    batch: int = 2
    negatives: int = 3
    max_len: int = 5

    @classmethod
    def parse(cls, text: str) -> "GradCheckDims":
        """``"d1=8,d2=12,n=5"`` style overrides of the defaults."""
        dims = cls()
        names = {f.name for f in fields(cls)}
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, _, value = part.partition("=")
            key = key.strip().replace("-", "_")
            if key not in names or not value.strip().isdigit() or int(value) < 1:
                raise ValidationError(f"--dims: bad entry {part!r}; expected name=positive-int with name in {sorted(names)}")
            setattr(dims, key, int(value))
        return dims


def _draw(rng: np.random.Generator, dims: GradCheckDims, config: ModelConfig):
    params = init_params(config, rng)
    # Wider than the training init: tiny gradients drown in finite-difference roundoff.
    params["W"] = rng.normal(0.0, 1.0 / np.sqrt(dims.d2), size=params["W"].shape)
    for name, value in params.items():
        if name == "word_embeddings" or name.startswith("lstm."):
            params[name] = rng.uniform(-0.5, 0.5, size=value.shape)
    params["word_embeddings"][0] = 0.0
    Z = rng.standard_normal((dims.k, dims.d1))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    samples = []
    for b in range(dims.batch):
        boxes = np.concatenate([rng.uniform(0, 100, (dims.n, 2)), rng.uniform(1, 50, (dims.n, 2))], axis=1)
        samples.append(AdSample(f"g{b}", 0, boxes, rng.standard_normal((dims.n, dims.d2)), rng.uniform(0, 1, dims.k), [0]))

    def sentence():
        return rng.integers(2, dims.vocab, size=int(rng.integers(1, dims.max_len + 1))).tolist()

    pos = [[sentence()] for _ in samples]
    neg = [[sentence() for _ in range(dims.negatives)] for _ in samples]
    return params, Z, samples, pos, neg


def _near_kink(params, config: ModelConfig, Z, samples, pos, neg, margin: float) -> bool:
    t = as_tensors(params)
    if config.spec.uses_coattention and config.coattention.suppression_enabled:
        _, trace = fuse_images(t, config, ImageBatch.from_samples(samples), Z)
        for hop in trace.hops[:-1]:
            thresh = config.coattention.suppression_ratio * hop.scores.max(axis=-1, keepdims=True)
            if (np.abs(hop.scores - thresh) < KINK_GAP).any():
                return True
    img = image_embeddings(t, config, samples, Z).data
    for b in range(len(samples)):
        enc = statement_encodings(t, config, pos[b] + neg[b]).data
        s = enc @ img[b] / (np.linalg.norm(enc, axis=1) * np.linalg.norm(img[b]))
        n_pos = len(pos[b])
        gaps = margin - s[:n_pos, None] + s[None, n_pos:]
        if (np.abs(gaps) < KINK_GAP).any():
            return True
    return False


def gradcheck_problem(seed: int, dims: GradCheckDims | None = None, variant: str = "VSE-CoAtt-2", margin: float = 0.2):
    """A random instance away from kinks: ``(objective, params)`` for :func:`check_gradients`."""
    dims = dims or GradCheckDims()
    spec = get_variant(variant)
    hops = dims.hops if spec.uses_coattention else None
    config = ModelConfig(
        variant, dims.d1, dims.d2, dims.vocab, dims.d_w, dims.d_e,
        coattention=coattention_config_for(spec, CoAttentionConfig(hops=max(dims.hops, 1)), hops),
    )
    rng = np.random.default_rng(seed)
    for _ in range(MAX_REDRAWS):
        params, Z, samples, pos, neg = _draw(rng, dims, config)
        if not _near_kink(params, config, Z, samples, pos, neg, margin):
            break
    else:
        raise ValidationError(f"no kink-free instance found in {MAX_REDRAWS} draws")

    def objective(tensors):
        loss, _ = batch_loss(tensors, config, samples, Z, pos, neg, margin)
        return loss

    return objective, params


def run_gradcheck(
    seed: int = 0,
    dims: GradCheckDims | None = None,
    variant: str = "VSE-CoAtt-2",
    step: float = 1e-5,
) -> list[GradCheckReport]:
    objective, params = gradcheck_problem(seed, dims, variant)
    return check_gradients(objective, params, step=step, rng=np.random.default_rng(seed))
