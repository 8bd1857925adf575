import numpy as np
import pytest

from btlab import corpus as C
from btlab import encoder as E
from btlab.numerics import Tensor, backward, cross_entropy, softmax

from gradcheck import assert_grads_match


def tiny_config(**over):
    base = dict(layers=1, d_model=8, n_heads=2, d_ff=16,
                vocab_size=13, max_positions=10)
    base.update(over)
    return E.EncoderConfig(**base)


def batch_of(ids_rows):
    ids = np.array(ids_rows, dtype=np.int64)
    mask = (ids != C.PAD).astype(np.int64)
    return ids, mask


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(d_model=9)          # not divisible by heads
    with pytest.raises(ValueError):
        tiny_config(dropout=0.1)
    with pytest.raises(ValueError):
        tiny_config(layers=-1)


def test_output_shape():
    cfg = E.EncoderConfig(layers=2, d_model=16, n_heads=2, d_ff=32,
                          vocab_size=20, max_positions=8)
    model = E.EncoderModel.build(cfg, seed=0)
    ids, mask = batch_of([[3, 8, 9, 10, 4, 0, 0, 0],
                          [3, 11, 12, 4, 0, 0, 0, 0]])
    hidden = E.encode_batch(model, ids, mask)
    assert hidden.shape == (2, 8, 16)
    assert np.isfinite(hidden.data).all()


def test_shape_violations_raise():
    model = E.EncoderModel.build(tiny_config(), seed=0)
    ids = np.zeros((2, 12), dtype=np.int64)   # 12 > max_positions
    with pytest.raises(ValueError):
        E.encode_batch(model, ids, np.ones_like(ids))
    ids = np.full((1, 4), 99, dtype=np.int64)  # out of vocab
    with pytest.raises(ValueError):
        E.encode_batch(model, ids, np.ones_like(ids))
    with pytest.raises(ValueError):
        E.encode_batch(model, np.zeros((2, 4), dtype=np.int64),
                       np.ones((2, 5), dtype=np.int64))


def test_pad_positions_cannot_leak():
    model = E.EncoderModel.build(tiny_config(layers=2), seed=1)
    ids, mask = batch_of([[3, 7, 8, 9, 4, 0, 0, 0]])
    base = E.encode_batch(model, ids, mask).data
    ids2 = ids.copy()
    ids2[0, 5:] = 12  # rewrite every PAD slot to an arbitrary real token
    out = E.encode_batch(model, ids2, mask).data
    np.testing.assert_allclose(out[0, :5], base[0, :5], atol=1e-6)


def test_zero_layers_is_layer_norm_of_embeddings():
    cfg = tiny_config(layers=0)
    model = E.EncoderModel.build(cfg, seed=2)
    ids, mask = batch_of([[3, 7, 8, 4]])
    got = E.encode_batch(model, ids, mask).data

    emb = model.params["tok_emb"].data[ids] + model.params["pos_emb"].data[:4]
    mean = emb.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = np.square(emb - mean).mean(axis=-1, keepdims=True, dtype=np.float64)
    want = ((emb - mean) / np.sqrt(var + 1e-5)).astype(np.float32)
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_attention_rows_sum_to_one():
    model = E.EncoderModel.build(tiny_config(layers=2), seed=3)
    ids, mask = batch_of([[3, 7, 8, 9, 4, 0, 0, 0],
                          [3, 10, 4, 0, 0, 0, 0, 0]])
    sink = []
    E.encode_batch(model, ids, mask, attn_sink=sink)
    assert len(sink) == 2
    for weights in sink:
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)
        # no weight at padded columns
        assert weights[0, :, :, 5:].max() == 0.0
        assert weights[1, :, :, 3:].max() == 0.0


def test_mlm_logits_shape_and_softmax():
    model = E.EncoderModel.build(tiny_config(), seed=4)
    ids, mask = batch_of([[3, 7, 8, 4]])
    logits = E.mlm_logits(model, E.encode_batch(model, ids, mask))
    assert logits.shape == (1, 4, 13)
    probs = softmax(logits).data
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_mlm_logits_orthonormal_embedding_recovers_token():
    cfg = tiny_config(d_model=16, vocab_size=13)
    model = E.EncoderModel.build(cfg, seed=5)
    eye = np.eye(13, 16, dtype=np.float32)
    model.params["tok_emb"].data = eye
    model.params["mlm_bias"].data[:] = 0.0
    hidden = Tensor(eye[None, :, :])  # [1, 13, 16]: position s holds embedding of token s
    logits = E.mlm_logits(model, hidden).data
    assert (logits.argmax(axis=-1)[0] == np.arange(13)).all()


def test_classify_shape_and_zero_head_uniform():
    model = E.EncoderModel.build(tiny_config(), seed=6)
    head = E.ClassifierHead.build(8, 3, seed=6)
    ids, mask = batch_of([[3, 7, 8, 4], [3, 9, 10, 4]])
    logits = E.classify(model, head, ids, mask)
    assert logits.shape == (2, 3)
    head.weight.data[:] = 0.0
    head.bias.data[:] = 0.0
    probs = softmax(E.classify(model, head, ids, mask)).data
    np.testing.assert_allclose(probs, 1.0 / 3.0, atol=1e-7)


def test_untrained_model_near_chance_on_balanced_labels():
    cfg = E.EncoderConfig(layers=1, d_model=16, n_heads=2, d_ff=32,
                          vocab_size=40, max_positions=8)
    model = E.EncoderModel.build(cfg, seed=7)
    head = E.ClassifierHead.build(16, 2, seed=7)
    rng = np.random.default_rng(7)
    n = 1000
    ids = rng.integers(7, 40, size=(n, 8))
    ids[:, 0] = C.CLS
    ids[:, -1] = C.SEP
    mask = np.ones_like(ids)
    labels = np.arange(n) % 2
    preds = []
    for start in range(0, n, 200):
        logits = E.classify(model, head, ids[start:start + 200], mask[start:start + 200])
        preds.append(logits.data.argmax(axis=-1))
    acc = (np.concatenate(preds) == labels).mean()
    assert abs(acc - 0.5) <= 0.05


def test_same_seed_same_model():
    cfg = tiny_config()
    a = E.EncoderModel.build(cfg, seed=11)
    b = E.EncoderModel.build(cfg, seed=11)
    assert a.params.names() == b.params.names()
    for name, t in a.params.items():
        assert t.data.tobytes() == b.params[name].data.tobytes()
    c = E.EncoderModel.build(cfg, seed=12)
    assert any(t.data.tobytes() != c.params[n].data.tobytes()
               for n, t in a.params.items())


def test_merged_parameters_share_tensors():
    model = E.EncoderModel.build(tiny_config(), seed=0)
    head = E.ClassifierHead.build(8, 2, seed=0)
    merged = E.merged_parameters(model.params, head.parameters())
    assert len(merged) == len(model.params) + 2
    merged["cls_head.weight"].data[:] = 5.0
    assert (head.weight.data == 5.0).all()


def test_full_forward_backward_gradient_check():
    cfg = tiny_config()
    model = E.EncoderModel.build(cfg, seed=13)
    params64 = model.params.astype(np.float64)
    model64 = E.EncoderModel(cfg, params64)
    ids, mask = batch_of([[3, 7, 8, 9, 4], [3, 10, 11, 4, 0]])
    targets = np.array([[-100, 9, -100, 7, -100],
                        [-100, -100, 12, -100, -100]])

    def loss_fn():
        logits = E.mlm_logits(model64, E.encode_batch(model64, ids, mask))
        return cross_entropy(logits, targets)

    assert_grads_match(loss_fn, params64, n_samples=120, seed=13)


def test_classifier_gradient_check():
    cfg = tiny_config()
    model = E.EncoderModel.build(cfg, seed=14)
    model64 = E.EncoderModel(cfg, model.params.astype(np.float64))
    head = E.ClassifierHead.build(8, 2, seed=14)
    head64 = E.ClassifierHead.build(8, 2, seed=14)
    head64.weight.data = head.weight.data.astype(np.float64)
    head64.bias.data = head.bias.data.astype(np.float64)
    merged = E.merged_parameters(model64.params, head64.parameters())
    ids, mask = batch_of([[3, 7, 8, 4], [3, 9, 10, 4]])
    labels = np.array([0, 1])

    def loss_fn():
        return cross_entropy(E.classify(model64, head64, ids, mask), labels)

    assert_grads_match(loss_fn, merged, n_samples=80, seed=14)
