import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btlab import corpus as C
from btlab import mlm
from btlab.encoder import EncoderConfig, EncoderModel
from btlab.numerics import IGNORE_ID, NonFiniteError, derived_rng


def small_model(vocab_size=40, max_positions=32, seed=0):
    cfg = EncoderConfig(layers=1, d_model=16, n_heads=2, d_ff=32,
                        vocab_size=vocab_size, max_positions=max_positions)
    return EncoderModel.build(cfg, seed=seed)


def small_vocab(n_words=30):
    words = [f"w{i}" for i in range(n_words)]
    return C.build_vocab([" ".join(words)])


# ---------------------------------------------------------------------------
# apply_masking
# ---------------------------------------------------------------------------

def test_rate_zero_is_identity():
    seq = [C.CLS, 10, 11, 12, C.SEP]
    ex = mlm.apply_masking(seq, 0.0, derived_rng(0, 0), vocab_size=40)
    assert ex.input_ids.tolist() == seq
    assert (ex.target_ids == IGNORE_ID).all()
    assert ex.mask_positions == ()


def test_seeded_golden_fixture():
    seq = [C.CLS] + list(range(10, 28)) + [C.SEP]
    ex = mlm.apply_masking(seq, 0.15, derived_rng(123, 0), vocab_size=40)
    assert ex.input_ids.tolist() == [3, 10, 11, 12, 13, 2, 15, 16, 17, 18, 19,
                                     2, 21, 2, 23, 24, 25, 26, 27, 4]
    assert ex.mask_positions == (5, 11, 13)
    want_targets = [IGNORE_ID] * 20
    for pos, orig in [(5, 14), (11, 20), (13, 22)]:
        want_targets[pos] = orig
    assert ex.target_ids.tolist() == want_targets


def test_masking_statistics_monte_carlo():
    V = 2048
    n = 100_000
    seq = np.full(n, 100, dtype=np.int64)  # one long all-candidate sequence
    ex = mlm.apply_masking(seq, 0.15, derived_rng(7, 0), vocab_size=V)

    selected = np.array(ex.mask_positions)
    frac = selected.size / n
    assert abs(frac - 0.15) <= 0.005

    inputs = ex.input_ids[selected]
    n_mask = int((inputs == C.MASK).sum())
    n_changed = int(((inputs != C.MASK) & (inputs != 100)).sum())
    n_same = int((inputs == 100).sum())
    assert abs(n_mask / selected.size - 0.8) <= 0.01
    assert abs(n_changed / selected.size - 0.1) <= 0.01
    assert abs(n_same / selected.size - 0.1) <= 0.01


def test_random_replacements_are_never_special():
    seq = np.full(5000, 10, dtype=np.int64)
    ex = mlm.apply_masking(seq, 1.0, derived_rng(3, 0), vocab_size=12,
                           mask_prob=0.0, random_prob=1.0)
    assert (ex.input_ids >= C.NUM_SPECIALS).all()
    assert (ex.target_ids == 10).all()


def test_specials_never_masked_even_at_rate_one():
    seq = [C.CLS, 10, C.SEP, 11, C.PAD, C.PAD]
    ex = mlm.apply_masking(seq, 1.0, derived_rng(5, 0), vocab_size=40)
    assert ex.input_ids[0] == C.CLS
    assert ex.input_ids[2] == C.SEP
    assert (ex.input_ids[4:] == C.PAD).all()
    assert set(ex.mask_positions) == {1, 3}
    assert ex.target_ids[0] == IGNORE_ID and ex.target_ids[2] == IGNORE_ID


@given(st.integers(min_value=0, max_value=10_000),
       st.floats(min_value=0.0, max_value=1.0),
       st.lists(st.integers(min_value=7, max_value=39), min_size=1, max_size=30))
@settings(max_examples=80, deadline=None)
def test_target_overlay_reconstructs_original(seed, rate, body):
    seq = np.array([C.CLS] + body + [C.SEP], dtype=np.int64)
    ex = mlm.apply_masking(seq, rate, derived_rng(seed, 0), vocab_size=40)
    rebuilt = ex.input_ids.copy()
    sel = ex.target_ids != IGNORE_ID
    rebuilt[sel] = ex.target_ids[sel]
    assert (rebuilt == seq).all()
    # unmasked positions were never altered
    assert (ex.input_ids[~sel] == seq[~sel]).all()
    assert tuple(np.nonzero(sel)[0]) == ex.mask_positions


# ---------------------------------------------------------------------------
# pack_corpus
# ---------------------------------------------------------------------------

def test_pack_groups_short_sentences():
    vocab = small_vocab()
    chunks = mlm.pack_corpus(["w0 w1", "w2", "w3 w4 w5"], vocab, max_len=16)
    assert len(chunks) == 1
    chunk = chunks[0]
    assert chunk[0] == C.CLS
    assert len(chunk) == 16
    seps = np.nonzero(chunk == C.SEP)[0]
    assert len(seps) == 3  # one per packed sentence


def test_pack_long_sentence_stands_alone():
    vocab = small_vocab()
    long_sent = " ".join(f"w{i}" for i in range(6))
    chunks = mlm.pack_corpus(["w0", long_sent, "w1"], vocab, max_len=16)
    assert len(chunks) == 3  # short, long (flushes buffer), short
    assert all(len(c) == 16 for c in chunks)


def test_pack_respects_max_len():
    vocab = small_vocab()
    chunks = mlm.pack_corpus(["w0 w1"] * 10, vocab, max_len=8)
    assert all(len(c) == 8 for c in chunks)
    assert len(chunks) > 1


def test_pack_empty_corpus_is_error():
    vocab = small_vocab()
    with pytest.raises(ValueError):
        mlm.pack_corpus([], vocab, max_len=16)
    with pytest.raises(ValueError):
        mlm.pack_corpus(["", ""], vocab, max_len=16)


# ---------------------------------------------------------------------------
# mlm_loss_of_batch
# ---------------------------------------------------------------------------

def _uniform_model(vocab_size=40):
    model = small_model(vocab_size=vocab_size)
    for _, t in model.params.items():
        t.data[:] = 0.0
    return model


def test_uniform_logits_loss_is_log_v():
    model = _uniform_model(vocab_size=40)
    seq = [C.CLS, 10, 11, 12, 13, 14, C.SEP]
    ex = mlm.apply_masking(seq, 0.5, derived_rng(1, 0), vocab_size=40)
    assert ex.mask_positions  # seed chosen so something is masked
    loss = mlm.mlm_loss_of_batch(model, [ex])
    assert abs(loss.item() - math.log(40)) < 1e-6


def test_duplicated_batch_same_loss():
    model = small_model()
    seq = [C.CLS, 10, 11, 12, 13, 14, C.SEP]
    ex = mlm.apply_masking(seq, 0.5, derived_rng(1, 0), vocab_size=40)
    one = mlm.mlm_loss_of_batch(model, [ex]).item()
    two = mlm.mlm_loss_of_batch(model, [ex, ex]).item()
    assert abs(one - two) < 1e-9


def test_zero_masked_positions_is_error():
    model = small_model()
    seq = [C.CLS, 10, 11, C.SEP]
    ex = mlm.apply_masking(seq, 0.0, derived_rng(0, 0), vocab_size=40)
    with pytest.raises(ValueError):
        mlm.mlm_loss_of_batch(model, [ex])
    with pytest.raises(ValueError):
        mlm.mlm_loss_of_batch(model, [])


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def toy_corpus():
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(30)]
    return [" ".join(rng.choice(words, size=rng.integers(3, 9)))
            for _ in range(40)]


def test_pretrain_zero_steps_is_bit_identical():
    vocab = small_vocab()
    model = small_model(vocab_size=len(vocab))
    before = {n: t.data.tobytes() for n, t in model.params.items()}
    _, trace = mlm.pretrain(model, toy_corpus(), mlm.PretrainConfig(steps=0), vocab)
    assert trace == []
    for n, t in model.params.items():
        assert t.data.tobytes() == before[n]


def test_pretrain_runs_exact_step_count_and_schedule():
    vocab = small_vocab()
    model = small_model(vocab_size=len(vocab))
    config = mlm.PretrainConfig(steps=12, batch_size=4, max_len=16, seed=5)
    _, trace = mlm.pretrain(model, toy_corpus(), config, vocab)
    assert [row[0] for row in trace] == list(range(1, 13))
    assert all(np.isfinite(row[2]) for row in trace)
    # warmup covers the first ceil(0.1*12) steps; lr rises then falls
    lrs = [row[1] for row in trace]
    assert lrs[0] > 0.0
    assert max(lrs) <= config.peak_lr + 1e-12


def test_pretrain_same_seed_identical_traces():
    vocab = small_vocab()
    corpus = toy_corpus()
    config = mlm.PretrainConfig(steps=8, batch_size=4, max_len=16, seed=9)
    m1, t1 = mlm.pretrain(small_model(vocab_size=len(vocab)), corpus, config, vocab)
    m2, t2 = mlm.pretrain(small_model(vocab_size=len(vocab)), corpus, config, vocab)
    assert t1 == t2
    for n, t in m1.params.items():
        assert t.data.tobytes() == m2.params[n].data.tobytes()


def test_pretrain_rejects_mask_rate_zero():
    vocab = small_vocab()
    model = small_model(vocab_size=len(vocab))
    with pytest.raises(ValueError):
        mlm.pretrain(model, toy_corpus(),
                     mlm.PretrainConfig(steps=1, mask_rate=0.0), vocab)


def test_pretrain_aborts_on_non_finite_with_step_index():
    vocab = small_vocab()
    model = small_model(vocab_size=len(vocab))
    model.params["tok_emb"].data[:] = np.nan
    config = mlm.PretrainConfig(steps=3, batch_size=4, max_len=16)
    with pytest.raises(NonFiniteError, match="step 1"):
        mlm.pretrain(model, toy_corpus(), config, vocab)


def test_loss_trace_csv_round_trip(tmp_path):
    trace = [(1, 5e-6, 3.6888794541139363), (2, 1e-5, 3.2)]
    path = tmp_path / "trace.csv"
    mlm.save_loss_trace(trace, path)
    text = path.read_text()
    assert text.splitlines()[0] == "step,lr,loss"
    assert mlm.load_loss_trace(path) == trace
