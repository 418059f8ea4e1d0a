import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tinydistill import tensor as T
from tinydistill.checkpoint import CheckpointError, load_checkpoint, model_hash, save_checkpoint
from tinydistill.gradcheck import check_gradients
from tinydistill.tensor import Tensor
from tinydistill.transformer import (
    ConfigError,
    LayerWeights,
    TransformerConfig,
    TransformerModel,
    attention_scores,
    ffn,
    forward,
    mha,
    parameter_count,
)

TINY = TransformerConfig(num_layers=2, hidden=8, ffn=12, heads=2, vocab_size=20, max_len=8, num_classes=2)


def _randomize(model, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = rng.normal(scale=scale, size=p.shape)
    return model


def _tokens(rng, b, l, vocab=20):
    tokens = rng.integers(4, vocab, size=(b, l))
    mask = np.ones((b, l), dtype=bool)
    return tokens, mask


def _layer(d, di, rng=None, zero=False):
    def w(*shape):
        return Tensor(np.zeros(shape) if zero else rng.normal(size=shape), requires_grad=True)

    return LayerWeights(w(d, d), w(d, d), w(d, d), w(d, d), None, None, w(d, di), w(di), w(di, d), w(d), None, None)


def test_config_validation():
    with pytest.raises(ConfigError):
        TransformerConfig(hidden=10, heads=3).validate()
    with pytest.raises(ConfigError):
        TransformerConfig(vocab_size=3).validate()
    TINY.validate()


def test_attention_scores_examples():
    z = Tensor(np.zeros((1, 1, 3, 4)))
    assert not attention_scores(z, z, 4).data.any()
    q = Tensor([[[[1.0, 2.0, 3.0, 4.0]]]])
    k = Tensor([[[[0.5, -1.0, 2.0, 1.0]]]])
    assert attention_scores(q, k, 4).data.item() == pytest.approx((0.5 - 2 + 6 + 4) / 2)
    rng = np.random.default_rng(0)
    q, k = Tensor(rng.normal(size=(2, 2, 3, 4))), Tensor(rng.normal(size=(2, 2, 3, 4)))
    np.testing.assert_allclose(attention_scores(T.scale(q, 2), k, 4).data, 2 * attention_scores(q, k, 4).data)


def test_mha_uniform_attention_is_mean_of_values():
    rng = np.random.default_rng(1)
    d, b, l = 6, 2, 5
    w = _layer(d, 4, rng)
    w.query.data[:] = 0
    w.key.data[:] = 0
    w.output.data = np.eye(d)
    x = Tensor(rng.normal(size=(b, l, d)))
    mask = np.ones((b, l), dtype=bool)
    mask[1, 3:] = False
    out, scores, probs = mha(x, w, 3, mask)
    v = x.data @ w.value.data
    np.testing.assert_allclose(out.data[0], np.broadcast_to(v[0].mean(axis=0), (l, d)), atol=1e-12)
    np.testing.assert_allclose(out.data[1], np.broadcast_to(v[1, :3].mean(axis=0), (l, d)), atol=1e-12)
    assert not scores.data.any()


def test_mha_single_head_is_plain_attention():
    rng = np.random.default_rng(2)
    d, l = 4, 3
    w = _layer(d, 4, rng)
    x = rng.normal(size=(1, l, d))
    out, _, _ = mha(Tensor(x), w, 1)
    q, k, v = x[0] @ w.query.data, x[0] @ w.key.data, x[0] @ w.value.data
    a = q @ k.T / math.sqrt(d)
    expect = np.stack([oracles.softmax(r) for r in a]) @ v @ w.output.data
    np.testing.assert_allclose(out.data[0], expect, rtol=1e-12)


def test_mha_ignores_padded_columns():
    rng = np.random.default_rng(3)
    w = _layer(4, 4, rng)
    x = rng.normal(size=(1, 5, 4))
    mask = np.array([[True, True, True, False, False]])
    out1, _, _ = mha(Tensor(x), w, 2, mask)
    x2 = x.copy()
    x2[0, [3, 4]] = x[0, [4, 3]]
    out2, _, _ = mha(Tensor(x2), w, 2, mask)
    np.testing.assert_allclose(out1.data[0, :3], out2.data[0, :3], rtol=1e-12)


def test_ffn_examples():
    rng = np.random.default_rng(4)
    w = _layer(3, 5, zero=True)
    w.b2.data = np.array([1.0, -2.0, 0.5])
    x = Tensor(rng.normal(size=(2, 4, 3)))
    np.testing.assert_array_equal(ffn(x, w).data, np.broadcast_to(w.b2.data, (2, 4, 3)))
    w = _layer(3, 3, zero=True)
    w.w1.data = np.eye(3)
    w.w2.data = np.eye(3)
    xp = np.abs(rng.normal(size=(2, 4, 3)))
    np.testing.assert_allclose(ffn(Tensor(xp), w).data, xp)
    w = _layer(3, 5, rng)
    got = ffn(x, w).data
    np.testing.assert_allclose(got, oracles.ffn(x.data, w.w1.data, w.b1.data, w.w2.data, w.b2.data), rtol=1e-12)


def test_forward_shapes():
    cfg = TransformerConfig(num_layers=2, hidden=8, heads=2, vocab_size=30, max_len=5, num_classes=2)
    model = TransformerModel.create(cfg)
    acts = forward(model, np.full((3, 5), 7))
    assert acts.embeddings.shape == (3, 5, 8)
    assert [a.shape for a in acts.attentions] == [(3, 2, 5, 5)] * 2
    assert [h.shape for h in acts.hiddens] == [(3, 5, 8)] * 2
    assert acts.logits.shape == (3, 2)


def test_forward_matches_numpy_oracle():
    rng = np.random.default_rng(5)
    model = _randomize(TransformerModel.create(TINY), seed=5)
    tokens, mask = _tokens(rng, 3, 6)
    mask[1, 4:] = False
    mask[2, 2:] = False
    acts = forward(model, tokens, mask)
    emb, scores, hiddens, logits = oracles.encoder(model.state(), TINY, tokens, mask)
    np.testing.assert_allclose(acts.embeddings.data, emb, rtol=1e-12)
    for a, s in zip(acts.attentions, scores):
        np.testing.assert_allclose(a.data, s, rtol=1e-10, atol=1e-12)
    for h, o in zip(acts.hiddens, hiddens):
        np.testing.assert_allclose(h.data, o, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(acts.logits.data, logits, rtol=1e-10, atol=1e-12)


def test_identical_rows_give_identical_activations():
    model = _randomize(TransformerModel.create(TINY), seed=6)
    tokens = np.tile(np.array([[1, 5, 9, 4]]), (3, 1))
    acts = forward(model, tokens)
    for t in [acts.embeddings, acts.logits, *acts.attentions, *acts.hiddens]:
        for row in t.data[1:]:
            np.testing.assert_array_equal(row, t.data[0])


def test_pad_position_token_does_not_change_logits():
    model = _randomize(TransformerModel.create(TINY), seed=7)
    tokens = np.array([[2, 5, 9, 0, 0]])
    mask = tokens != 0
    base = forward(model, tokens, mask).logits.data
    tokens[0, 4] = 11
    np.testing.assert_array_equal(forward(model, tokens, mask).logits.data, base)


def test_forward_errors():
    model = TransformerModel.create(TINY)
    with pytest.raises(ValueError):
        forward(model, np.array([[1, 20]]))
    with pytest.raises(ValueError):
        forward(model, np.ones((1, 9), dtype=int))


def test_attention_probabilities_respect_mask():
    model = _randomize(TransformerModel.create(TINY), seed=8)
    tokens = np.array([[2, 5, 9, 0, 0], [2, 6, 7, 8, 3]])
    mask = tokens != 0
    for probs in forward(model, tokens, mask).attention_probs:
        np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-12)
        assert probs.data[0, :, :, 3:].max() < 1e-30


@settings(max_examples=10, deadline=None)
@given(layers=st.integers(1, 4), heads=st.sampled_from([1, 2, 4]), seed=st.integers(0, 1000))
def test_activation_lists_have_one_entry_per_layer(layers, heads, seed):
    cfg = TransformerConfig(num_layers=layers, hidden=8, heads=heads, seed=seed)
    acts = forward(TransformerModel.create(cfg), np.ones((1, 3), dtype=int))
    assert len(acts.attentions) == len(acts.hiddens) == layers


def test_forward_deterministic():
    model = TransformerModel.create(TINY.replace(seed=3))
    tokens = np.array([[1, 4, 5, 6]])
    a, b = forward(model, tokens), forward(model, tokens)
    np.testing.assert_array_equal(a.logits.data, b.logits.data)


def test_dropout_seeded_and_off_by_default():
    model = TransformerModel.create(TINY.replace(dropout=0.3))
    tokens = np.array([[1, 4, 5, 6]])
    plain = forward(model, tokens).logits.data
    np.testing.assert_array_equal(forward(model, tokens).logits.data, plain)
    d1 = forward(model, tokens, rng=np.random.default_rng(0)).hiddens[-1].data
    d2 = forward(model, tokens, rng=np.random.default_rng(0)).hiddens[-1].data
    np.testing.assert_array_equal(d1, d2)
    assert not np.allclose(d1, forward(model, tokens).hiddens[-1].data)


def test_end_to_end_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    model = _randomize(TransformerModel.create(TINY), seed=9, scale=0.3)
    tokens, mask = _tokens(rng, 2, 6)
    mask[1, 5] = False
    labels = np.array([0, 1])

    def f():
        return T.cross_entropy(forward(model, tokens, mask).logits, labels)

    params = [model.params[k] for k in ("layers.0.attn.query", "layers.1.ffn.w1", "embeddings.position")]
    check_gradients(f, params, rtol=1e-3)


# --- parameter counting ---------------------------------------------------


def test_parameter_count_embedding_only():
    cfg = TransformerConfig(num_layers=0, hidden=8, vocab_size=30, max_len=10, num_classes=0)
    assert parameter_count(cfg) == 30 * 8 + 10 * 8


def test_parameter_count_doubling_vocab():
    cfg = TINY
    assert parameter_count(cfg.replace(vocab_size=40)) - parameter_count(cfg) == 20 * 8


def test_parameter_count_hand_tally_and_model_agree():
    # V=20,d=8,L=8: emb 160+64; per layer 4*64 attn + 8*12+12 + 12*8+8 + 32 norms = 500; head 8*2+2
    assert parameter_count(TINY) == 160 + 64 + 2 * 500 + 18
    model = TransformerModel.create(TINY)
    assert sum(p.data.size for p in model.parameters()) == parameter_count(TINY)
    mlm = TINY.replace(mlm_head=True)
    assert sum(p.data.size for p in TransformerModel.create(mlm).parameters()) == parameter_count(mlm)


def test_init_is_truncated_normal():
    model = TransformerModel.create(TransformerConfig(hidden=32, ffn=64, vocab_size=200, seed=1))
    w = model.params["embeddings.token"].data
    assert np.abs(w).max() <= 0.04
    assert 0.012 < w.std() < 0.02
    assert not model.params["layers.0.ffn.b1"].data.any()


# --- checkpoints ----------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = _randomize(TransformerModel.create(TINY.replace(mlm_head=True)), seed=10)
    model.meta["dev_accuracy"] = 0.875
    h = save_checkpoint(model, tmp_path / "ck", vocab=["[PAD]", "[MASK]", "[CLS]", "[SEP]", "a"])
    ck = load_checkpoint(tmp_path / "ck")
    assert ck.hash == h == model_hash(model, ck.vocab)
    assert ck.model.config == model.config
    assert ck.model.meta == {"dev_accuracy": 0.875}
    assert ck.model.lineage == {"stage": "init", "parent": "root"}
    assert ck.vocab[-1] == "a"
    for name, p in model.params.items():
        assert p.data.tobytes() == ck.model.params[name].data.tobytes()
    h2 = save_checkpoint(ck.model, tmp_path / "ck2", vocab=ck.vocab)
    assert h2 == h
    assert (tmp_path / "ck" / "weights.bin").read_bytes() == (tmp_path / "ck2" / "weights.bin").read_bytes()


def test_checkpoint_tampered_blob_rejected(tmp_path):
    save_checkpoint(TransformerModel.create(TINY), tmp_path / "ck")
    blob = tmp_path / "ck" / "weights.bin"
    raw = bytearray(blob.read_bytes())
    raw[17] ^= 0x01
    blob.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "ck")


def test_checkpoint_corrupt_manifest_reports_offset(tmp_path):
    save_checkpoint(TransformerModel.create(TINY), tmp_path / "ck")
    man = tmp_path / "ck" / "manifest.txt"
    lines = man.read_bytes().split(b"\n")
    offset = len(lines[0]) + 1 + len(lines[1]) + 1
    lines[2] = b"garbage-without-separator"
    man.write_bytes(b"\n".join(lines))
    with pytest.raises(CheckpointError, match=f"byte offset {offset}"):
        load_checkpoint(tmp_path / "ck")
