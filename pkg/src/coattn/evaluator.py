"""Candidate pools, mean-rank evaluation and the cross-validated variant grid."""

from __future__ import annotations

import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dataset import AdSample, DatasetManifest, SplitPlan
from .errors import CoAttnError, EvaluationError, MetricError, ValidationError
from .model import VARIANTS, as_tensors, get_variant, score_candidates, statement_encodings
from .trainer import Checkpoint, TrainConfig, check_compatible, statement_token_ids, train

log = logging.getLogger(__name__)

POOL_SIZE = 50
RELATED_COUNT = 3
VARIANT_ORDER = list(VARIANTS)
BASELINE_NOTE = (
    "VSE pools proposal features weighted by box area as a stand-in for a whole-image feature; "
    "VSE-P pools them uniformly. Both are linear in the features, so they differ only in pooling weights."
)


@dataclass
class RankingResult:
    image_id: str
    ranked_ids: list[int]
    scores: dict[int, float]
    ranks: dict[int, int]
    related_ids: list[int]

    @property
    def top_rank(self) -> int:
        return min(self.ranks[i] for i in self.related_ids)


def image_rng(seed: int, image_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(image_id.encode())])


def build_candidate_pool(
    sample: AdSample,
    manifest: DatasetManifest,
    rng: np.random.Generator,
    size: int = POOL_SIZE,
    related_count: int = RELATED_COUNT,
    strict: bool = False,
) -> list[int]:
    """The related statements plus same-topic distractors, ``size`` ids in all (sorted).

    Distractors are backfilled from other topics, with a warning, when the
    image's topic is too small.
    """
    related = list(dict.fromkeys(sample.related_statement_ids))
    if strict and len(related) != related_count:
        raise EvaluationError(f"image {sample.image_id} has {len(related)} related statements, expected {related_count}")
    need = size - len(related)
    if need < 0:
        raise EvaluationError(f"image {sample.image_id}: {len(related)} related statements exceed pool size {size}")
    exclude = set(related)
    same = [i for i in sorted(manifest.topics.get(sample.topic_id, [])) if i not in exclude]
    if len(same) >= need:
        chosen = [same[i] for i in rng.choice(len(same), size=need, replace=False)]
    else:
        others = [i for i in sorted(manifest.statements) if i not in exclude and i not in set(same)]
        if len(same) + len(others) < need:
            raise EvaluationError(f"image {sample.image_id}: only {len(same) + len(others)} distractors for {need} slots")
        log.warning("image %s: topic has %d distractors, backfilling %d from other topics",
                    sample.image_id, len(same), need - len(same))
        chosen = same + [others[i] for i in rng.choice(len(others), size=need - len(same), replace=False)]
    return sorted(related + chosen)


def rank_by_scores(image_id: str, scores: dict[int, float], related_ids: Sequence[int]) -> RankingResult:
    """Sort descending by score, ties by ascending statement id; ranks start at 1."""
    ranked = sorted(scores, key=lambda i: (-scores[i], i))
    return RankingResult(image_id, ranked, dict(scores), {sid: r for r, sid in enumerate(ranked, 1)}, list(related_ids))


class Ranker:
    """Scores images against statements with a trained checkpoint.

    All statement encodings are computed once up front.
    """

    def __init__(self, ckpt: Checkpoint, manifest: DatasetManifest):
        check_compatible(ckpt, manifest)
        self.ckpt = ckpt
        self.manifest = manifest
        self.params = as_tensors(ckpt.params)
        tokens = statement_token_ids(manifest, ckpt.vocabulary)
        self.statement_ids = sorted(tokens)
        self.row = {sid: r for r, sid in enumerate(self.statement_ids)}
        chunks = [
            statement_encodings(self.params, ckpt.model, [tokens[s] for s in self.statement_ids[i : i + 256]]).data
            for i in range(0, len(self.statement_ids), 256)
        ]
        self.encodings = np.concatenate(chunks, axis=0)

    def score(self, sample: AdSample, statement_ids: Sequence[int]) -> np.ndarray:
        rows = [self.row[s] for s in statement_ids]
        return score_candidates(self.params, self.ckpt.model, sample, self.manifest.symbol_embeddings, self.encodings[rows])


def rank_statements(sample: AdSample, pool: Sequence[int], scorer) -> RankingResult:
    """Rank ``pool`` for one image; ``scorer`` is a :class:`Ranker` or ``f(sample, ids) -> scores``."""
    score_fn = scorer.score if hasattr(scorer, "score") else scorer
    try:
        values = score_fn(sample, list(pool))
    except CoAttnError as exc:
        raise EvaluationError(f"image {sample.image_id}: {exc}") from exc
    return rank_by_scores(sample.image_id, {int(i): float(v) for i, v in zip(pool, values)}, sample.related_statement_ids)


def mean_rank(results: Sequence[RankingResult]) -> float:
    if not results:
        raise MetricError("mean rank of an empty result set")
    return float(np.mean([r.top_rank for r in results]))


def evaluate(
    scorer,
    manifest: DatasetManifest,
    image_ids: Sequence[str] | None = None,
    eval_seed: int = 0,
    pool_size: int = POOL_SIZE,
) -> list[RankingResult]:
    """Rank a fresh candidate pool for every requested image."""
    index = manifest.sample_index()
    ids = [s.image_id for s in manifest.samples] if image_ids is None else list(image_ids)
    results = []
    for image_id in ids:
        if image_id not in index:
            raise ValidationError(f"unknown image id {image_id!r}")
        sample = manifest.samples[index[image_id]]
        pool = build_candidate_pool(sample, manifest, image_rng(eval_seed, image_id), size=pool_size)
        results.append(rank_statements(sample, pool, scorer))
    return results


def ranking_report(results: Sequence[RankingResult], **meta) -> dict:
    return {
        **meta,
        "mean_rank": mean_rank(results),
        "n_images": len(results),
        "images": [
            {"image_id": r.image_id, "top_rank": r.top_rank,
             "related_ranks": [r.ranks[i] for i in r.related_ids]}
            for r in results
        ],
    }


# ---------------------------------------------------------------------------
# cross-validated benchmark


def _fold_job(args) -> dict:
    manifest, plan, fold, train_config = args
    try:
        ckpt = train(manifest, train_config, train_ids=plan.train_ids(fold))
        results = evaluate(Ranker(ckpt, manifest), manifest, plan.folds[fold], eval_seed=train_config.seed)
        return {
            "fold": fold,
            "mean_rank": mean_rank(results),
            "n_images": len(results),
            "seed": train_config.seed,
            "config_hash": train_config.digest(),
        }
    except CoAttnError as exc:
        return {"fold": fold, "error": str(exc), "seed": train_config.seed, "config_hash": train_config.digest()}


def run_benchmark(
    manifest: DatasetManifest,
    splits: SplitPlan,
    variants: Sequence[str],
    train_config: TrainConfig,
    workers: int = 1,
    on_fold: Callable[[str, dict], None] | None = None,
) -> dict:
    """Train each variant on four folds, evaluate on the fifth, for every fold.

    A failing fold is recorded and the run continues. With ``workers > 1``
    folds run in separate processes; the report does not depend on it.
    """
    for v in variants:
        get_variant(v)
    jobs = []
    for v in variants:
        cfg = TrainConfig(**{**train_config.to_dict(), "variant": v})
        cfg.validate()
        jobs.extend((v, (manifest, splits, k, cfg)) for k in range(len(splits.folds)))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outcomes = list(ex.map(_fold_job, [a for _, a in jobs]))
    else:
        outcomes = []
        for v, a in jobs:
            outcomes.append(_fold_job(a))
            if on_fold is not None:
                on_fold(v, outcomes[-1])

    report_variants = {}
    for v in variants:
        spec = get_variant(v)
        folds = [o for (jv, _), o in zip(jobs, outcomes) if jv == v]
        ranks = [f["mean_rank"] for f in folds if "mean_rank" in f]
        aggregate = None
        if ranks:
            aggregate = {
                "mean": float(np.mean(ranks)),
                "sd": float(np.std(ranks, ddof=1)) if len(ranks) > 1 else 0.0,
                "n_folds": len(ranks),
            }
        report_variants[v] = {
            "proposals": spec.uses_proposals,
            "attention": spec.uses_attention,
            "co_attention": spec.uses_coattention,
            "folds": folds,
            "aggregate": aggregate,
        }
    return {
        "split_seed": splits.seed,
        "train_config": train_config.to_dict(),
        "n_images": len(manifest.samples),
        "variants": report_variants,
        "note": BASELINE_NOTE,
    }


def format_table(report: dict) -> str:
    """Plain-text table with the proposals / attention / co-attention / mean-rank columns."""
    header = ("METHOD", "Box Proposals", "Att.", "Co-Att.", "Mean Rank")
    rows = []
    for vid, entry in report["variants"].items():
        agg = entry["aggregate"]
        rank = "failed" if agg is None else f"{agg['mean']:.2f} +/- {agg['sd']:.2f}"
        rows.append((vid, "x" if entry["proposals"] else "", "x" if entry["attention"] else "",
                     "x" if entry["co_attention"] else "", rank))
    widths = [max(len(r[i]) for r in (header, *rows)) for i in range(len(header))]
    line = "  ".join("{:<%d}" % w for w in widths)
    out = [line.format(*header), "  ".join("-" * w for w in widths)]
    out.extend(line.format(*r) for r in rows)
    return "\n".join(out)


def expected_random_top_rank(pool_size: int = POOL_SIZE, related: int = RELATED_COUNT) -> float:
    """E[min rank] of ``related`` items placed uniformly among ``pool_size``: (n + 1) / (r + 1)."""
    return (pool_size + 1) / (related + 1)


def top_rank_bounds(pool_size: int = POOL_SIZE, related: int = RELATED_COUNT) -> tuple[int, int]:
    return 1, pool_size - related + 1


def median(values: Sequence[float]) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))

