"""Statement encoder: vocabulary, word embeddings and a single-layer LSTM.

The LSTM is one fused differentiable op with its own backward-through-time
rule, so a whole padded batch of statements costs one graph node.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, EmptyStatementError, ValidationError, VocabularyError
from .tensor import Tensor, take

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
GATES = ("i", "f", "o", "c")
LSTM_PARAM_NAMES = tuple(f"{kind}_{g}" for kind in ("W", "U", "b") for g in GATES)
POOLINGS = ("last", "mean")

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Dense token -> id map with ``<pad>`` = 0 and ``<unk>`` = 1."""

    def __init__(self, token_to_id: Mapping[str, int]):
        mapping = dict(token_to_id)
        if mapping.get(PAD_TOKEN) != PAD or mapping.get(UNK_TOKEN) != UNK:
            raise VocabularyError(f'vocabulary must map "{PAD_TOKEN}" to 0 and "{UNK_TOKEN}" to 1')
        ids = sorted(mapping.values())
        if ids != list(range(len(ids))):
            raise VocabularyError("vocabulary ids must be dense in [0, V)")
        self.token_to_id = mapping
        self.id_to_token = [""] * len(ids)
        for tok, i in mapping.items():
            self.id_to_token[i] = tok

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocabulary":
        mapping = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
        for tok in sorted(set(tokens) - {PAD_TOKEN, UNK_TOKEN}):
            mapping[tok] = len(mapping)
        return cls(mapping)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.token_to_id == other.token_to_id

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def to_json(self) -> str:
        ordered = {tok: i for i, tok in enumerate(self.id_to_token)}
        return json.dumps(ordered, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise VocabularyError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(data, dict) or not all(isinstance(v, int) for v in data.values()):
            raise VocabularyError(f"{path}: expected an object mapping token to integer id")
        return cls(data)


def load_word_embeddings(path: str | Path, vocab: Vocabulary, table: np.ndarray) -> np.ndarray:
    """Overwrite rows of ``table`` from a JSON ``{token: [floats]}`` file.

    Tokens missing from the file keep their current rows; PAD stays zero.
    """
    vectors = json.loads(Path(path).read_text())
    out = np.array(table, dtype=np.float64)
    for tok, vec in vectors.items():
        i = vocab.token_to_id.get(tok)
        if i is None or i == PAD:
            continue
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (out.shape[1],):
            raise DimensionError(f"embedding for {tok!r} has shape {vec.shape}, table rows are {out.shape[1]}")
        out[i] = vec
    return out


def init_encoder_params(vocab_size: int, d_w: int, d_e: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(-0.08, 0.08) weights, forget-gate bias 1, zero PAD row."""
    table = rng.uniform(-0.08, 0.08, size=(vocab_size, d_w))
    table[PAD] = 0.0
    params = {"word_embeddings": table}
    for g in GATES:
        params[f"lstm.W_{g}"] = rng.uniform(-0.08, 0.08, size=(d_e, d_w))
    for g in GATES:
        params[f"lstm.U_{g}"] = rng.uniform(-0.08, 0.08, size=(d_e, d_e))
    for g in GATES:
        params[f"lstm.b_{g}"] = rng.uniform(-0.08, 0.08, size=d_e) + (1.0 if g == "f" else 0.0)
    return params


def lstm_params(params: Mapping[str, Tensor], prefix: str = "lstm.") -> dict[str, Tensor]:
    return {name: params[prefix + name] for name in LSTM_PARAM_NAMES}


def strip_pad(ids: Sequence[int]) -> list[int]:
    return [int(i) for i in ids if int(i) != PAD]


def embed_tokens(ids: Sequence[int], table: Tensor) -> Tensor:
    """Rows of ``table`` for the non-PAD ids, shape ``(T, D_w)``."""
    vocab_size = table.shape[0]
    bad = [i for i in ids if not 0 <= int(i) < vocab_size]
    if bad:
        raise VocabularyError(f"token id {bad[0]} outside vocabulary of size {vocab_size}")
    kept = strip_pad(ids)
    if not kept:
        raise EmptyStatementError("statement is empty after removing padding")
    return take(table, kept)


def pad_batch(sequences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad PAD-stripped id sequences into an ``(S, L)`` matrix plus lengths."""
    stripped = [strip_pad(s) for s in sequences]
    if any(not s for s in stripped):
        raise EmptyStatementError("statement is empty after removing padding")
    lengths = np.array([len(s) for s in stripped], dtype=np.int64)
    ids = np.full((len(stripped), int(lengths.max())), PAD, dtype=np.int64)
    for row, s in enumerate(stripped):
        ids[row, : len(s)] = s
    return ids, lengths


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_encode(
    x: Tensor,
    params: Mapping[str, Tensor],
    lengths: np.ndarray | None = None,
    pooling: str = "last",
) -> Tensor:
    """Run an LSTM from zero state over ``x`` and pool the hidden states.

    ``x`` is ``(T, D_w)`` for one statement or ``(S, T, D_w)`` for a padded
    batch, in which case ``lengths`` gives each row's true length and steps
    past it leave the state untouched. ``pooling='last'`` returns the final
    hidden state, ``'mean'`` the average over valid steps.
    """
    if pooling not in POOLINGS:
        raise ValidationError(f"unknown pooling {pooling!r}; choose from {POOLINGS}")
    single = x.ndim == 2
    xs = x.data[None] if single else x.data
    if xs.ndim != 3 or xs.shape[1] < 1:
        raise DimensionError(f"lstm_encode expects (T, D_w) or (S, T, D_w), got {x.shape}")
    n_seq, n_steps, d_w = xs.shape
    lengths = np.full(n_seq, n_steps, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (n_seq,) or (lengths < 1).any() or (lengths > n_steps).any():
        raise DimensionError(f"lengths {lengths.tolist()} inconsistent with input shape {x.shape}")

    ordered = [params[name] for name in LSTM_PARAM_NAMES]
    d_e = params["b_i"].shape[0]
    expected = {"W": (d_e, d_w), "U": (d_e, d_e), "b": (d_e,)}
    for name, p in zip(LSTM_PARAM_NAMES, ordered):
        if p.shape != expected[name[0]]:
            raise DimensionError(f"LSTM parameter {name} has shape {p.shape}, expected {expected[name[0]]}")
    Wx = np.concatenate([params[f"W_{g}"].data for g in GATES], axis=0)
    U = np.concatenate([params[f"U_{g}"].data for g in GATES], axis=0)
    b = np.concatenate([params[f"b_{g}"].data for g in GATES], axis=0)

    pre = xs @ Wx.T + b
    h = np.zeros((n_seq, d_e))
    c = np.zeros((n_seq, d_e))
    masks = (np.arange(n_steps)[:, None] < lengths[None, :])[..., None].astype(np.float64)
    cache = []
    pooled = np.zeros((n_seq, d_e))
    for t in range(n_steps):
        a = pre[:, t] + h @ U.T
        i = _sigmoid(a[:, :d_e])
        f = _sigmoid(a[:, d_e : 2 * d_e])
        o = _sigmoid(a[:, 2 * d_e : 3 * d_e])
        g = np.tanh(a[:, 3 * d_e :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        m = masks[t]
        cache.append((i, f, o, g, c, tc, h))
        c = m * c_new + (1.0 - m) * c
        h = m * h_new + (1.0 - m) * h
        if pooling == "mean":
            pooled += m * h_new
    if pooling == "mean":
        out = pooled / lengths[:, None]
    else:
        out = h

    def backward(grad):
        grad = grad[None] if single else grad
        dWx = np.zeros_like(Wx)
        dU = np.zeros_like(U)
        db = np.zeros_like(b)
        dx = np.zeros_like(xs)
        per_step = grad / lengths[:, None] if pooling == "mean" else None
        dh = np.zeros((n_seq, d_e)) if pooling == "mean" else grad.copy()
        dc = np.zeros((n_seq, d_e))
        for t in reversed(range(n_steps)):
            i, f, o, g, c_prev, tc, h_prev = cache[t]
            m = masks[t]
            dh_new = m * dh
            if per_step is not None:
                dh_new = dh_new + m * per_step
            dc_new = m * dc + dh_new * o * (1.0 - tc * tc)
            da = np.concatenate(
                [
                    dc_new * g * i * (1.0 - i),
                    dc_new * c_prev * f * (1.0 - f),
                    dh_new * tc * o * (1.0 - o),
                    dc_new * i * (1.0 - g * g),
                ],
                axis=1,
            )
            dWx += da.T @ xs[:, t]
            dU += da.T @ h_prev
            db += da.sum(axis=0)
            dx[:, t] = da @ Wx
            dh = da @ U + (1.0 - m) * dh
            dc = dc_new * f + (1.0 - m) * dc
        grads = [dx[0] if single else dx]
        for mat, dmat in ((Wx, dWx), (U, dU), (b, db)):
            grads.extend(np.split(dmat, 4, axis=0))
        return tuple(grads)

    return Tensor._from_op(out[0] if single else out, (x, *ordered), backward, "lstm")


def encode_statement(
    tokens: Sequence[int],
    table: Tensor,
    params: Mapping[str, Tensor],
    pooling: str = "last",
) -> Tensor:
    """psi(y): embed the token ids and run the LSTM. Returns shape ``(D_e,)``."""
    return lstm_encode(embed_tokens(tokens, table), params, pooling=pooling)


def encode_statements(
    sequences: Sequence[Sequence[int]],
    table: Tensor,
    params: Mapping[str, Tensor],
    pooling: str = "last",
) -> Tensor:
    """Batched :func:`encode_statement`; returns ``(S, D_e)``."""
    vocab_size = table.shape[0]
    for seq in sequences:
        for i in seq:
            if not 0 <= int(i) < vocab_size:
                raise VocabularyError(f"token id {i} outside vocabulary of size {vocab_size}")
    ids, lengths = pad_batch(sequences)
    return lstm_encode(take(table, ids), params, lengths=lengths, pooling=pooling)
