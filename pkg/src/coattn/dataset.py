"""Corpus format, validation, cross-validation splits and the synthetic generator.

A corpus is one JSON document::

    {"version": ..., "dims": {"d1": .., "d2": ..},
     "symbols": [{"id", "name", "embedding"}],
     "statements": [{"id", "tokens"}],
     "topics": [{"id", "statement_ids"}],
     "samples": [{"image_id", "topic_id", "boxes", "features",
                  "symbol_probs", "related_statement_ids"}],
     "latent": {...}}            # optional, synthetic corpora only

``symbol_probs`` is index-aligned with ``symbols``; ``boxes`` with
``features``. The optional ``latent`` block records the generator's ground
truth (which symbols are active per image, which proposals were drawn from
which symbol, which symbols each statement names).
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .coattention import ProposalFeatures, SymbolSet
from .encoder import Vocabulary
from .errors import DanglingReferenceError, DatasetError, DatasetParseError, DimensionMismatchError, SplitError

log = logging.getLogger(__name__)

FORMAT_VERSION = "coattn-dataset/1"
MAX_STATEMENT_TOKENS = 32
N_FOLDS = 5


@dataclass
class AdSample:
    image_id: str
    topic_id: int
    boxes: np.ndarray
    features: np.ndarray
    symbol_probs: np.ndarray
    related_statement_ids: list[int]

    @property
    def proposals(self) -> ProposalFeatures:
        return ProposalFeatures(self.features, self.boxes)


@dataclass
class DatasetManifest:
    version: str
    d1: int
    d2: int
    symbol_ids: list[int]
    symbol_names: list[str]
    symbol_embeddings: np.ndarray
    statements: dict[int, list[str]]
    topics: dict[int, list[int]]
    samples: list[AdSample]
    latent: dict | None = None
    _vocab: Vocabulary | None = field(default=None, repr=False, compare=False)
    _latent_index: dict | None = field(default=None, repr=False, compare=False)

    @property
    def n_symbols(self) -> int:
        return len(self.symbol_ids)

    def symbol_set(self, sample: AdSample) -> SymbolSet:
        return SymbolSet(self.symbol_embeddings, sample.symbol_probs, list(self.symbol_names))

    def vocabulary(self) -> Vocabulary:
        if self._vocab is None:
            self._vocab = Vocabulary.from_tokens(t for toks in self.statements.values() for t in toks)
        return self._vocab

    def sample_index(self) -> dict[str, int]:
        return {s.image_id: i for i, s in enumerate(self.samples)}

    def statement_topics(self) -> dict[int, int]:
        return {sid: tid for tid, sids in self.topics.items() for sid in sids}

    def subset(self, image_ids) -> "DatasetManifest":
        keep = set(image_ids)
        return DatasetManifest(
            self.version, self.d1, self.d2, self.symbol_ids, self.symbol_names, self.symbol_embeddings,
            self.statements, self.topics, [s for s in self.samples if s.image_id in keep], self.latent,
        )

    def to_dict(self) -> dict:
        doc: dict[str, Any] = {
            "version": self.version,
            "dims": {"d1": self.d1, "d2": self.d2},
            "symbols": [
                {"id": i, "name": n, "embedding": e.tolist()}
                for i, n, e in zip(self.symbol_ids, self.symbol_names, self.symbol_embeddings)
            ],
            "statements": [{"id": sid, "tokens": list(toks)} for sid, toks in self.statements.items()],
            "topics": [{"id": tid, "statement_ids": list(sids)} for tid, sids in self.topics.items()],
            "samples": [
                {
                    "image_id": s.image_id,
                    "topic_id": s.topic_id,
                    "boxes": s.boxes.tolist(),
                    "features": s.features.tolist(),
                    "symbol_probs": s.symbol_probs.tolist(),
                    "related_statement_ids": list(s.related_statement_ids),
                }
                for s in self.samples
            ],
        }
        if self.latent is not None:
            doc["latent"] = self.latent
        return doc

    def to_json(self) -> str:
        """Canonical serialization; floats use the shortest exact repr."""
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"


def save_dataset(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(manifest.to_json())


# ---------------------------------------------------------------------------
# loading and validation


def _require(cond: bool, where: str, msg: str, exc=DatasetError):
    if not cond:
        raise exc(f"{where}: {msg}")


def _real_matrix(value, where: str, cols: int | None = None) -> np.ndarray:
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise DatasetError(f"{where}: expected a numeric matrix ({e})") from None
    _require(arr.ndim == 2 and arr.shape[0] >= 1, where, f"expected a non-empty matrix, got shape {arr.shape}")
    if cols is not None:
        _require(arr.shape[1] == cols, where, f"rows have {arr.shape[1]} entries, expected {cols}", DimensionMismatchError)
    _require(bool(np.isfinite(arr).all()), where, "non-finite value")
    return arr


def _real_vector(value, where: str, length: int) -> np.ndarray:
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise DatasetError(f"{where}: expected a numeric vector ({e})") from None
    _require(arr.shape == (length,), where, f"expected {length} values, got shape {arr.shape}", DimensionMismatchError)
    _require(bool(np.isfinite(arr).all()), where, "non-finite value")
    return arr


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def parse_dataset(doc: Any, strict: bool = False) -> DatasetManifest:
    """Validate a decoded corpus document and build the manifest."""
    _require(isinstance(doc, dict), "<root>", "expected a JSON object")
    for key in ("version", "dims", "symbols", "statements", "topics", "samples"):
        _require(key in doc, "<root>", f"missing key {key!r}")
    dims = doc["dims"]
    _require(isinstance(dims, dict) and _is_int(dims.get("d1")) and _is_int(dims.get("d2")),
             "dims", "expected integer d1 and d2")
    d1, d2 = dims["d1"], dims["d2"]
    _require(d1 > 0 and d2 > 0, "dims", "dimensions must be positive")

    symbols = doc["symbols"]
    _require(isinstance(symbols, list) and symbols, "symbols", "expected a non-empty list")
    symbol_ids, names, embeddings = [], [], []
    for i, sym in enumerate(symbols):
        where = f"symbols[{i}]"
        _require(isinstance(sym, dict) and _is_int(sym.get("id")) and isinstance(sym.get("name"), str),
                 where, "expected {id: int, name: str, embedding: [...]}")
        symbol_ids.append(sym["id"])
        names.append(sym["name"])
        embeddings.append(_real_vector(sym.get("embedding"), f"{where}.embedding", d1))
    _require(len(set(symbol_ids)) == len(symbol_ids), "symbols", "duplicate symbol id")

    statements: dict[int, list[str]] = {}
    _require(isinstance(doc["statements"], list), "statements", "expected a list")
    for i, st in enumerate(doc["statements"]):
        where = f"statements[{i}]"
        _require(isinstance(st, dict) and _is_int(st.get("id")), where, "expected {id: int, tokens: [str]}")
        toks = st.get("tokens")
        _require(isinstance(toks, list) and toks and all(isinstance(t, str) and t for t in toks),
                 f"{where}.tokens", "expected a non-empty list of tokens")
        _require(st["id"] not in statements, where, f"duplicate statement id {st['id']}")
        if len(toks) > MAX_STATEMENT_TOKENS:
            log.warning("statement %d has %d tokens; truncated to %d", st["id"], len(toks), MAX_STATEMENT_TOKENS)
            toks = toks[:MAX_STATEMENT_TOKENS]
        statements[st["id"]] = list(toks)

    topics: dict[int, list[int]] = {}
    _require(isinstance(doc["topics"], list), "topics", "expected a list")
    for i, tp in enumerate(doc["topics"]):
        where = f"topics[{i}]"
        _require(isinstance(tp, dict) and _is_int(tp.get("id")) and isinstance(tp.get("statement_ids"), list),
                 where, "expected {id: int, statement_ids: [int]}")
        _require(tp["id"] not in topics, where, f"duplicate topic id {tp['id']}")
        for sid in tp["statement_ids"]:
            _require(sid in statements, where, f"unknown statement id {sid}", DanglingReferenceError)
        topics[tp["id"]] = list(tp["statement_ids"])

    samples: list[AdSample] = []
    seen_images: set[str] = set()
    _require(isinstance(doc["samples"], list) and doc["samples"], "samples", "expected a non-empty list")
    for i, sm in enumerate(doc["samples"]):
        where = f"samples[{i}]"
        _require(isinstance(sm, dict), where, "expected an object")
        image_id = sm.get("image_id")
        _require(isinstance(image_id, str) and image_id, f"{where}.image_id", "expected a non-empty string")
        _require(image_id not in seen_images, where, f"duplicate image id {image_id!r}")
        seen_images.add(image_id)
        _require(sm.get("topic_id") in topics, f"{where}.topic_id", f"unknown topic id {sm.get('topic_id')}",
                 DanglingReferenceError)
        features = _real_matrix(sm.get("features"), f"{where}.features", d2)
        boxes = _real_matrix(sm.get("boxes"), f"{where}.boxes", 4)
        _require(boxes.shape[0] == features.shape[0], f"{where}.boxes",
                 f"{boxes.shape[0]} boxes for {features.shape[0]} feature rows", DimensionMismatchError)
        _require(bool((boxes[:, 2:] >= 0).all()), f"{where}.boxes", "negative box extent")
        probs = _real_vector(sm.get("symbol_probs"), f"{where}.symbol_probs", len(symbol_ids))
        _require(bool(((probs >= 0) & (probs <= 1)).all()), f"{where}.symbol_probs", "probabilities must lie in [0, 1]")
        if strict:
            _require(bool((probs > 0.5).any()), f"{where}.symbol_probs", "strict mode needs a symbol with p > 0.5")
        related = sm.get("related_statement_ids")
        _require(isinstance(related, list) and related, f"{where}.related_statement_ids", "expected a non-empty list")
        for sid in related:
            _require(sid in statements, f"{where}.related_statement_ids", f"unknown statement id {sid}",
                     DanglingReferenceError)
        samples.append(AdSample(image_id, sm["topic_id"], boxes, features, probs, list(related)))

    return DatasetManifest(
        str(doc["version"]), d1, d2, symbol_ids, names, np.array(embeddings), statements, topics, samples,
        doc.get("latent"),
    )


def load_dataset(path: str | Path, strict: bool = False) -> DatasetManifest:
    """Read and fully validate a corpus file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DatasetError(f"{path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_dataset(doc, strict=strict)


# ---------------------------------------------------------------------------
# cross-validation splits


@dataclass
class SplitPlan:
    folds: list[list[str]]
    seed: int

    def train_ids(self, k: int) -> list[str]:
        return [i for j, fold in enumerate(self.folds) if j != k for i in fold]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "folds": self.folds}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls([list(f) for f in d["folds"]], int(d["seed"]))


def make_splits(manifest: DatasetManifest, seed: int, n_folds: int = N_FOLDS) -> SplitPlan:
    """Seeded shuffle of the image ids, dealt round-robin into folds."""
    ids = [s.image_id for s in manifest.samples]
    if len(ids) < n_folds:
        raise SplitError(f"{len(ids)} samples cannot fill {n_folds} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return SplitPlan([shuffled[k::n_folds] for k in range(n_folds)], seed)


# ---------------------------------------------------------------------------
# synthetic corpora

SYMBOL_NAMES = [
    "danger", "safety", "death", "power", "hunger", "fun", "humor", "love", "health", "freedom",
    "beauty", "strength", "speed", "violence", "nature", "environment", "family", "adventure", "comfort",
    "luxury", "sex", "youth", "injury", "protection", "femininity", "masculinity", "happiness", "sadness",
    "fear", "success", "tradition", "technology", "money", "friendship", "entertainment", "variety",
    "refreshing", "delicious", "animals", "pollution", "addiction", "smoking", "alcohol", "sports",
    "travel", "peace", "hope", "education", "cleanliness", "excitement", "romance", "art", "crime",
]
ACTIONS = ["buy", "choose", "support", "avoid", "try", "remember", "watch", "drive", "eat", "protect", "stop", "join"]
FILLERS = ["it", "is", "the", "a", "really", "always", "more", "very", "this", "brings", "means", "shows",
           "about", "life", "you", "my"]


@dataclass
class SynthSpec:
    images: int = 600
    proposals: int = 12
    symbols: int = 8
    d1: int = 32
    d2: int = 48
    noise: float = 0.1
    related_per_image: int = 3
    family_size: int = 6
    max_active: int = 3
    aligned_per_symbol: int = 2
    clutter_scale: float = 2.0
    filler_tokens: int = 2
    surface_forms: int = 4
    seed: int = 0

    def validate(self) -> None:
        for name in ("images", "proposals", "symbols", "d1", "d2", "related_per_image", "family_size",
                     "max_active", "aligned_per_symbol", "surface_forms"):
            if getattr(self, name) < 1:
                raise DatasetError(f"--{name.replace('_', '-')} must be positive, got {getattr(self, name)}")
        if self.noise < 0:
            raise DatasetError(f"--noise must be nonnegative, got {self.noise}")
        if self.clutter_scale < 0:
            raise DatasetError(f"--clutter-scale must be nonnegative, got {self.clutter_scale}")
        if self.filler_tokens < 0:
            raise DatasetError(f"--filler-tokens must be nonnegative, got {self.filler_tokens}")

    def to_dict(self) -> dict:
        return asdict(self)


def symbol_name(k: int) -> str:
    return SYMBOL_NAMES[k] if k < len(SYMBOL_NAMES) else f"symbol{k}"


def surface_form(name: str, variant: int) -> str:
    """Paraphrase stand-in: variant 0 is the symbol name itself, others append the variant number."""
    return name if variant == 0 else f"{name}{variant}"


def _family_subsets(family, max_active: int) -> list[tuple[int, ...]]:
    return [c for r in range(1, min(max_active, len(family)) + 1) for c in itertools.combinations(family, r)]


def generate_synthetic(spec: SynthSpec) -> DatasetManifest:
    """Build a corpus with known region/symbol/statement alignments.

    Topics own a family of symbols; every image in a topic activates a
    distinct non-empty subset of its family (p = 1 for active symbols,
    uniform(0, 0.2) otherwise). ``aligned_per_symbol`` proposals per active
    symbol are drawn around ``A z_k`` with Gaussian noise of std ``noise``
    per coordinate, ``A`` being a fixed random linear map; the rest are
    isotropic Gaussian clutter with std ``clutter_scale``. Statements name
    the active symbols in random order among template and filler tokens,
    each symbol written in one of ``surface_forms`` spellings.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    K, d1, d2 = spec.symbols, spec.d1, spec.d2

    Z = rng.standard_normal((K, d1))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    A = rng.standard_normal((d2, d1))

    family_size = min(spec.family_size, K)
    n_subsets = len(_family_subsets(range(family_size), spec.max_active))
    n_topics = math.ceil(spec.images / n_subsets)
    topic_members = [list(range(spec.images))[t::n_topics] for t in range(n_topics)]

    names = [symbol_name(k) for k in range(K)]
    statements: dict[int, list[str]] = {}
    statement_symbols: list[dict] = []
    topics: dict[int, list[int]] = {}
    samples: list[AdSample | None] = [None] * spec.images
    latent_samples: list[dict | None] = [None] * spec.images

    for t, members in enumerate(topic_members):
        family = sorted(rng.choice(K, size=family_size, replace=False).tolist())
        subsets = _family_subsets(family, spec.max_active)
        chosen = rng.permutation(len(subsets))
        topics[t] = []
        for j, img in enumerate(members):
            # distinct subsets within a topic while they last
            active = list(subsets[chosen[j % len(subsets)]])
            probs = rng.uniform(0.0, 0.2, size=K)
            probs[active] = 1.0

            sources = [k for k in active for _ in range(spec.aligned_per_symbol)][: spec.proposals]
            feats = spec.clutter_scale * rng.standard_normal((spec.proposals, d2))
            for row, k in enumerate(sources):
                feats[row] = A @ Z[k] + spec.noise * rng.standard_normal(d2)
            order = rng.permutation(spec.proposals)
            feats = feats[order]
            aligned = sorted([int(np.flatnonzero(order == row)[0]), k] for row, k in enumerate(sources))

            wh = rng.uniform(16.0, 320.0, size=(spec.proposals, 2))
            xy = rng.uniform(0.0, 1.0, size=(spec.proposals, 2)) * (np.array([640.0, 480.0]) - np.minimum(wh, [640.0, 480.0]))
            boxes = np.round(np.concatenate([xy, wh], axis=1), 1)

            related = []
            for _ in range(spec.related_per_image):
                sid = len(statements)
                words = [surface_form(names[k], int(rng.integers(spec.surface_forms))) for k in active]
                statements[sid] = _make_statement(rng, words, spec.filler_tokens)
                statement_symbols.append({"id": sid, "symbols": sorted(active)})
                related.append(sid)
                topics[t].append(sid)
            image_id = f"img{img:05d}"
            samples[img] = AdSample(image_id, t, boxes, feats, probs, related)
            latent_samples[img] = {"image_id": image_id, "active_symbols": sorted(active), "aligned_proposals": aligned}

    latent = {
        "generator": spec.to_dict(),
        "projection": A.tolist(),
        "samples": latent_samples,
        "statements": statement_symbols,
    }
    return DatasetManifest(
        FORMAT_VERSION, d1, d2, list(range(K)), names, Z, statements, topics, samples, latent,
    )


def _make_statement(rng: np.random.Generator, symbol_tokens: list[str], n_fillers: int) -> list[str]:
    named = [symbol_tokens[i] for i in rng.permutation(len(symbol_tokens))]
    body: list[str] = []
    for i, tok in enumerate(named):
        if i:
            body.append("and")
        body.append(tok)
    for _ in range(int(rng.integers(0, n_fillers + 1))):
        body.insert(int(rng.integers(0, len(body) + 1)), FILLERS[int(rng.integers(len(FILLERS)))])
    tokens = ["i", "should", ACTIONS[int(rng.integers(len(ACTIONS)))], "because", *body]
    return tokens[:MAX_STATEMENT_TOKENS]


def latent_alignment_score(manifest: DatasetManifest, sample: AdSample, statement_id: int) -> float:
    """Jaccard overlap between an image's active symbols and those a statement names.

    Uses the generator's ground truth, so it is only defined for synthetic corpora.
    """
    if manifest.latent is None:
        raise DatasetError("corpus has no latent alignment block")
    index = _latent_lookup(manifest)
    active = index["samples"][sample.image_id]
    named = index["statements"][statement_id]
    return len(active & named) / len(active | named)


def _latent_lookup(manifest: DatasetManifest) -> dict:
    if manifest._latent_index is None:
        manifest._latent_index = {
            "samples": {s["image_id"]: set(s["active_symbols"]) for s in manifest.latent["samples"]},
            "statements": {s["id"]: set(s["symbols"]) for s in manifest.latent["statements"]},
        }
    return manifest._latent_index
