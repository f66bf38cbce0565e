import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coattn.encoder import (
    GATES,
    LSTM_PARAM_NAMES,
    PAD,
    UNK,
    Vocabulary,
    embed_tokens,
    encode_statement,
    encode_statements,
    init_encoder_params,
    load_word_embeddings,
    lstm_encode,
    lstm_params,
    pad_batch,
    tokenize,
)
from coattn.errors import DimensionError, EmptyStatementError, ValidationError, VocabularyError
from coattn.tensor import Tensor, check_gradients, tsum

D_W, D_E = 3, 4


def _params(rng, d_w=D_W, d_e=D_E, scale=0.5):
    out = {}
    for g in GATES:
        out[f"W_{g}"] = rng.uniform(-scale, scale, (d_e, d_w))
        out[f"U_{g}"] = rng.uniform(-scale, scale, (d_e, d_e))
        out[f"b_{g}"] = rng.uniform(-scale, scale, d_e)
    return out


def _tensors(arrays):
    return {k: Tensor(v) for k, v in arrays.items()}


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def _reference_lstm(x, p):
    """Plain per-step recurrence with explicit loops over units."""
    d_e = p["b_i"].shape[0]
    h = [0.0] * d_e
    c = [0.0] * d_e
    for xt in x:
        pre = {
            g: [float(p[f"W_{g}"][u] @ xt + p[f"U_{g}"][u] @ np.array(h) + p[f"b_{g}"][u]) for u in range(d_e)]
            for g in GATES
        }
        c = [_sig(pre["f"][u]) * c[u] + _sig(pre["i"][u]) * math.tanh(pre["c"][u]) for u in range(d_e)]
        h = [_sig(pre["o"][u]) * math.tanh(c[u]) for u in range(d_e)]
    return np.array(h)


class TestVocabulary:
    def test_tokenize(self):
        assert tokenize("I should BUY this, because: it's fun!") == ["i", "should", "buy", "this", "because", "it", "s", "fun"]

    def test_specials_and_dense_ids(self):
        v = Vocabulary.from_tokens(["b", "a", "b"])
        assert v.token_to_id == {"<pad>": 0, "<unk>": 1, "a": 2, "b": 3}
        assert v.encode(["a", "zzz"]) == [2, UNK]

    def test_missing_specials_rejected(self):
        with pytest.raises(VocabularyError):
            Vocabulary({"a": 0, "<unk>": 1})

    def test_gap_in_ids_rejected(self):
        with pytest.raises(VocabularyError):
            Vocabulary({"<pad>": 0, "<unk>": 1, "a": 3})

    def test_file_round_trip(self, tmp_path):
        v = Vocabulary.from_tokens(["x", "y"])
        v.save(tmp_path / "vocab.json")
        assert Vocabulary.load(tmp_path / "vocab.json") == v
        assert json.loads((tmp_path / "vocab.json").read_text())["<pad>"] == 0

    def test_load_bad_json(self, tmp_path):
        (tmp_path / "v.json").write_text("{not json")
        with pytest.raises(VocabularyError, match="line 1"):
            Vocabulary.load(tmp_path / "v.json")

    def test_digest_stable(self):
        assert Vocabulary.from_tokens(["a", "b"]).digest() == Vocabulary.from_tokens(["b", "a"]).digest()


class TestEmbedTokens:
    def test_unk_row(self, rng):
        table = rng.standard_normal((6, D_W))
        assert np.array_equal(embed_tokens([UNK], Tensor(table)).data, table[[UNK]])

    def test_pad_stripped(self, rng):
        table = rng.standard_normal((6, D_W))
        out = embed_tokens([PAD, 5], Tensor(table)).data
        assert out.shape == (1, D_W) and np.array_equal(out[0], table[5])

    @given(st.lists(st.integers(1, 19), min_size=1, max_size=10), st.integers(0, 1000))
    def test_gather_oracle(self, ids, seed):
        table = np.random.default_rng(seed).standard_normal((20, D_W))
        expected = np.stack([table[i] for i in ids])
        assert np.array_equal(embed_tokens(ids, Tensor(table)).data, expected)

    def test_out_of_range(self, rng):
        with pytest.raises(VocabularyError, match="7"):
            embed_tokens([2, 7], Tensor(rng.standard_normal((6, D_W))))

    def test_empty_after_stripping(self, rng):
        with pytest.raises(EmptyStatementError):
            embed_tokens([PAD, PAD], Tensor(rng.standard_normal((6, D_W))))


class TestLstm:
    def test_zero_params_give_zero(self, rng):
        zero = {k: np.zeros_like(v) for k, v in _params(rng).items()}
        out = lstm_encode(Tensor(rng.standard_normal((5, D_W))), _tensors(zero)).data
        assert np.array_equal(out, np.zeros(D_E))

    def test_single_step_hand_oracle(self):
        # D_w = D_e = 1, x = 0.5
        p = {
            "W_i": [[0.2]], "W_f": [[0.3]], "W_o": [[-0.4]], "W_c": [[0.6]],
            "U_i": [[0.1]], "U_f": [[0.1]], "U_o": [[0.1]], "U_c": [[0.1]],
            "b_i": [0.1], "b_f": [1.0], "b_o": [0.0], "b_c": [-0.2],
        }
        i = _sig(0.2 * 0.5 + 0.1)
        o = _sig(-0.4 * 0.5)
        g = math.tanh(0.6 * 0.5 - 0.2)
        expected = o * math.tanh(i * g)
        out = lstm_encode(Tensor([[0.5]]), _tensors({k: np.array(v, float) for k, v in p.items()})).item()
        assert out == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("steps", [1, 3, 7])
    def test_matches_reference_recurrence(self, rng, steps):
        p = _params(rng)
        x = rng.standard_normal((steps, D_W))
        assert np.allclose(lstm_encode(Tensor(x), _tensors(p)).data, _reference_lstm(x, p), atol=1e-13)

    @pytest.mark.parametrize("steps", [1, 3, 7])
    @pytest.mark.parametrize("pooling", ["last", "mean"])
    def test_backward_through_time(self, rng, steps, pooling):
        p = _params(rng)
        p["x"] = rng.standard_normal((steps, D_W))
        readout = Tensor(rng.standard_normal(D_E))

        def f(t):
            return tsum(lstm_encode(t["x"], t, pooling=pooling) * readout)

        for rep in check_gradients(f, p):
            assert rep.max_rel_error < 1e-4, rep.name

    def test_sum_of_output_gradients(self, rng):
        p = _params(rng)
        x = rng.standard_normal((4, D_W))
        reports = check_gradients(lambda t: tsum(lstm_encode(Tensor(x), t)), p)
        assert {r.name for r in reports} == set(LSTM_PARAM_NAMES)
        assert all(r.max_rel_error < 1e-4 for r in reports)

    def test_padded_batch_matches_individual(self, rng):
        p = _tensors(_params(rng))
        seqs = [rng.standard_normal((n, D_W)) for n in (2, 5, 1)]
        batch = np.zeros((3, 5, D_W))
        for r, s in enumerate(seqs):
            batch[r, : len(s)] = s
        for pooling in ("last", "mean"):
            out = lstm_encode(Tensor(batch), p, lengths=np.array([2, 5, 1]), pooling=pooling).data
            for r, s in enumerate(seqs):
                assert np.allclose(out[r], lstm_encode(Tensor(s), p, pooling=pooling).data, atol=1e-14)

    def test_padded_batch_gradients(self, rng):
        p = _params(rng)
        p["x"] = rng.standard_normal((3, 4, D_W))
        lengths = np.array([4, 2, 3])
        readout = Tensor(rng.standard_normal((3, D_E)))
        reports = check_gradients(lambda t: tsum(lstm_encode(t["x"], t, lengths=lengths) * readout), p)
        assert all(r.max_rel_error < 1e-4 for r in reports)
        x_rep = next(r for r in reports if r.name == "x")
        flat = np.zeros((3, 4, D_W), bool)
        flat[1, 2:] = True
        padded = set(np.flatnonzero(flat.ravel()).tolist())
        for coord, a in zip(x_rep.coords.tolist(), x_rep.analytic):
            if coord in padded:
                assert a == 0.0

    @given(st.integers(0, 10_000))
    @settings(max_examples=50)
    def test_hidden_state_bounded(self, seed):
        rng = np.random.default_rng(seed)
        out = lstm_encode(Tensor(10 * rng.standard_normal((6, D_W))), _tensors(_params(rng, scale=3.0))).data
        assert (np.abs(out) <= 1.0).all()

    def test_bad_lengths(self, rng):
        with pytest.raises(DimensionError):
            lstm_encode(Tensor(rng.standard_normal((2, 3, D_W))), _tensors(_params(rng)), lengths=np.array([4, 1]))

    def test_bad_pooling(self, rng):
        with pytest.raises(ValidationError):
            lstm_encode(Tensor(rng.standard_normal((2, D_W))), _tensors(_params(rng)), pooling="max")

    def test_inconsistent_param_shapes(self, rng):
        p = _params(rng)
        p["U_f"] = np.zeros((D_E, D_E + 1))
        with pytest.raises(DimensionError):
            lstm_encode(Tensor(rng.standard_normal((2, D_W))), _tensors(p))


class TestEncodeStatement:
    def _setup(self, rng):
        table = rng.standard_normal((10, D_W))
        table[PAD] = 0.0
        return Tensor(table), _tensors(_params(rng))

    def test_deterministic(self, rng):
        table, p = self._setup(rng)
        a = encode_statement([3, 4, 5], table, p).data
        b = encode_statement([3, 4, 5], table, p).data
        assert a.tobytes() == b.tobytes()

    def test_order_sensitive(self, rng):
        table, p = self._setup(rng)
        assert not np.allclose(encode_statement([3, 4, 5], table, p).data, encode_statement([5, 4, 3], table, p).data)

    def test_repeated_token_zero_recurrence(self, rng):
        table, p = self._setup(rng)
        arrays = {k: v.data.copy() for k, v in p.items()}
        for g in GATES:
            arrays[f"U_{g}"][:] = 0.0
        p = _tensors(arrays)
        steps = 4
        psi = encode_statement([7] * steps, table, p).data
        # gates are constant, so c_T = i g (1 + f + ... + f^(T-1))
        x = table.data[7]
        gate = {g: arrays[f"W_{g}"] @ x + arrays[f"b_{g}"] for g in GATES}
        i, f, o = (1 / (1 + np.exp(-gate[k])) for k in "ifo")
        c = i * np.tanh(gate["c"]) * (1 - f**steps) / (1 - f)
        assert np.allclose(psi, o * np.tanh(c), atol=1e-14)
        # other rows of the table are irrelevant
        other = table.data.copy()
        other[[2, 3, 9]] = rng.standard_normal((3, D_W))
        assert np.array_equal(encode_statement([7] * steps, Tensor(other), p).data, psi)

    def test_batch_matches_single(self, rng):
        table, p = self._setup(rng)
        seqs = [[2, 3], [4, 5, 6, 7], [PAD, 8]]
        out = encode_statements(seqs, table, p).data
        for r, s in enumerate(seqs):
            assert np.allclose(out[r], encode_statement(s, table, p).data, atol=1e-14)

    def test_batch_rejects_bad_ids(self, rng):
        table, p = self._setup(rng)
        with pytest.raises(VocabularyError):
            encode_statements([[2, 30]], table, p)

    def test_pad_batch(self):
        ids, lengths = pad_batch([[2, PAD, 3], [4]])
        assert ids.tolist() == [[2, 3], [4, PAD]] and lengths.tolist() == [2, 1]


class TestInitAndLoad:
    def test_init_conventions(self, rng):
        p = init_encoder_params(12, D_W, D_E, rng)
        assert np.array_equal(p["word_embeddings"][PAD], np.zeros(D_W))
        for name in LSTM_PARAM_NAMES:
            arr = p[f"lstm.{name}"]
            centre = 1.0 if name == "b_f" else 0.0
            assert (np.abs(arr - centre) <= 0.08).all()
        assert set(lstm_params({k: Tensor(v) for k, v in p.items()})) == set(LSTM_PARAM_NAMES)

    def test_load_word_embeddings(self, tmp_path, rng):
        vocab = Vocabulary.from_tokens(["cat", "dog"])
        table = np.zeros((len(vocab), 2))
        (tmp_path / "emb.json").write_text(json.dumps({"dog": [1.0, 2.0], "<pad>": [5.0, 5.0], "eel": [3.0, 3.0]}))
        out = load_word_embeddings(tmp_path / "emb.json", vocab, table)
        assert out[vocab.token_to_id["dog"]].tolist() == [1.0, 2.0]
        assert out[PAD].tolist() == [0.0, 0.0]
        assert out[vocab.token_to_id["cat"]].tolist() == [0.0, 0.0]

    def test_load_word_embeddings_dim_mismatch(self, tmp_path):
        vocab = Vocabulary.from_tokens(["cat"])
        (tmp_path / "emb.json").write_text(json.dumps({"cat": [1.0]}))
        with pytest.raises(DimensionError):
            load_word_embeddings(tmp_path / "emb.json", vocab, np.zeros((3, 2)))
