import numpy as np
import pytest

from btlab.corpus import CLS, LabeledExample, build_vocab
from btlab.encoder import ClassifierHead, EncoderModel, desk_config
from btlab.pipeline.finetune import (FINE_TUNE_LR, FineTuneParams,
                                     default_grid, encode_examples, evaluate,
                                     fine_tune, grid_search_fine_tune,
                                     predict_labels)
from btlab.pipeline.synthdata import generate_labeled


@pytest.fixture(scope="module")
def task():
    train = generate_labeled(48, seed=31, train_keywords_only=True)
    validation = generate_labeled(24, seed=32, train_keywords_only=True)
    vocab = build_vocab([ex.text for ex in train + validation])
    model = EncoderModel.build(desk_config(len(vocab)), seed=0)
    head = ClassifierHead.build(64, 2, seed=0)
    return train, validation, vocab, model, head


def params_snapshot(model, head):
    return ([t.data.copy() for _, t in model.params.items()],
            [head.weight.data.copy(), head.bias.data.copy()])


def snapshots_equal(a, b):
    return (all(np.array_equal(x, y) for x, y in zip(a[0], b[0]))
            and all(np.array_equal(x, y) for x, y in zip(a[1], b[1])))


def test_hparam_validation():
    with pytest.raises(ValueError):
        FineTuneParams(epochs=-1, batch_size=8, weight_decay=0.0)
    with pytest.raises(ValueError):
        FineTuneParams(epochs=2, batch_size=0, weight_decay=0.0)
    with pytest.raises(ValueError):
        FineTuneParams(epochs=2, batch_size=8, weight_decay=-0.1)
    with pytest.raises(ValueError):
        FineTuneParams(epochs=2, batch_size=8, weight_decay=0.0, lr=0.0)


def test_default_grid_covers_the_full_product():
    grid = default_grid()
    assert len(grid) == 12
    combos = {(g.epochs, g.batch_size, g.weight_decay) for g in grid}
    assert combos == {(e, b, wd) for e in (2, 3) for b in (8, 16, 32)
                      for wd in (0.0, 0.01)}
    assert all(g.lr == FINE_TUNE_LR for g in grid)
    assert all(g.lr == 1e-3 for g in default_grid(lr=1e-3))


def test_encode_examples_frames_and_pads():
    vocab = build_vocab(["good movie", "bad movie"])
    ids, masks = encode_examples(["good movie", "bad"], vocab, max_len=6)
    assert ids.shape == masks.shape == (2, 6)
    assert (ids[:, 0] == CLS).all()
    assert masks[0].sum() == 4 and masks[1].sum() == 3


def test_single_class_split_rejected(task):
    train, validation, vocab, model, head = task
    ones = [ex for ex in train if ex.label == 1]
    hp = FineTuneParams(epochs=1, batch_size=8, weight_decay=0.0)
    with pytest.raises(ValueError, match="single class"):
        fine_tune(model, head, ones, validation, hp, vocab)
    with pytest.raises(ValueError, match="non-empty"):
        fine_tune(model, head, [], validation, hp, vocab)
    unlabeled = [LabeledExample(ex.text) for ex in train]
    with pytest.raises(ValueError, match="labeled"):
        fine_tune(model, head, unlabeled, validation, hp, vocab)


def test_zero_epochs_returns_unchanged_params(task):
    train, validation, vocab, model, head = task
    hp = FineTuneParams(epochs=0, batch_size=8, weight_decay=0.0)
    before = params_snapshot(model, head)
    tuned_model, tuned_head, trace = fine_tune(model, head, train, validation,
                                               hp, vocab)
    assert snapshots_equal(before, params_snapshot(tuned_model, tuned_head))
    assert len(trace) == 1 and trace[0][0] == 0


def test_inputs_are_never_mutated(task):
    train, validation, vocab, model, head = task
    before = params_snapshot(model, head)
    hp = FineTuneParams(epochs=2, batch_size=16, weight_decay=0.01, lr=1e-3)
    fine_tune(model, head, train, validation, hp, vocab, seed=1)
    assert snapshots_equal(before, params_snapshot(model, head))


def test_same_seed_reproduces_and_seeds_differ(task):
    train, validation, vocab, model, head = task
    hp = FineTuneParams(epochs=2, batch_size=8, weight_decay=0.0, lr=1e-3)
    m1, h1, t1 = fine_tune(model, head, train, validation, hp, vocab, seed=5)
    m2, h2, t2 = fine_tune(model, head, train, validation, hp, vocab, seed=5)
    m3, _, t3 = fine_tune(model, head, train, validation, hp, vocab, seed=6)
    assert t1 == t2
    assert snapshots_equal(params_snapshot(m1, h1), params_snapshot(m2, h2))
    assert not snapshots_equal(params_snapshot(m1, h1), params_snapshot(m3, h1))


def test_returned_params_are_the_best_epoch(task):
    from btlab.pipeline.finetune import _mean_loss
    train, validation, vocab, model, head = task
    hp = FineTuneParams(epochs=3, batch_size=8, weight_decay=0.0, lr=1e-3)
    tuned_model, tuned_head, trace = fine_tune(model, head, train, validation,
                                               hp, vocab, seed=2)
    ids, masks = encode_examples([ex.text for ex in validation], vocab, 32)
    labels = np.asarray([ex.label for ex in validation], dtype=np.int64)
    returned = _mean_loss(tuned_model, tuned_head, ids, masks, labels)
    completed = [loss for epoch, loss in trace if epoch >= 1]
    assert returned == pytest.approx(min(completed), abs=1e-9)
    assert len(trace) <= hp.epochs + 1


def test_early_stop_halts_after_first_rise(task):
    train, validation, vocab, model, head = task
    # A large lr makes validation loss rise quickly; the trace must never
    # continue past the first increase between completed epochs.
    hp = FineTuneParams(epochs=6, batch_size=8, weight_decay=0.0, lr=5e-2)
    _, _, trace = fine_tune(model, head, train, validation, hp, vocab, seed=0)
    losses = [loss for epoch, loss in trace if epoch >= 1]
    for i in range(1, len(losses) - 1):
        assert losses[i] <= losses[i - 1], trace
    assert len(trace) >= 3


def test_grid_search_tie_prefers_small_epoch_then_batch(task):
    train, validation, vocab, model, head = task
    # With a vanishing lr every grid point scores identically, so the tie
    # rule must pick the smallest epochs, then the smallest batch.
    grid = [FineTuneParams(epochs=e, batch_size=b, weight_decay=0.0, lr=1e-12)
            for e in (3, 2) for b in (32, 8)]
    result = grid_search_fine_tune(model, head, train, validation, grid,
                                   "accuracy", vocab, seed=0)
    assert (result.chosen.epochs, result.chosen.batch_size) == (2, 8)
    assert len(result.table) == len(grid)
    assert result.validation_score == max(s for _, s in result.table)


def test_grid_search_rejects_empty_grid(task):
    train, validation, vocab, model, head = task
    with pytest.raises(ValueError, match="non-empty"):
        grid_search_fine_tune(model, head, train, validation, [], "accuracy",
                              vocab)


def test_separable_toy_reaches_high_train_accuracy():
    train = generate_labeled(160, seed=41)
    validation = generate_labeled(48, seed=42)
    vocab = build_vocab([ex.text for ex in train + validation])
    model = EncoderModel.build(desk_config(len(vocab)), seed=3)
    head = ClassifierHead.build(64, 2, seed=3)
    grid = [FineTuneParams(epochs=3, batch_size=8, weight_decay=wd, lr=1e-3)
            for wd in (0.0, 0.01)]
    result = grid_search_fine_tune(model, head, train, validation, grid,
                                   "accuracy", vocab, seed=3)
    score = evaluate(result.model, result.head, train, "accuracy", vocab)
    assert score >= 0.99


def test_evaluate_validation_errors(task):
    train, _, vocab, model, head = task
    with pytest.raises(ValueError, match="unknown metric"):
        evaluate(model, head, train, "auc", vocab)
    with pytest.raises(ValueError, match="non-empty"):
        evaluate(model, head, [], "accuracy", vocab)
    with pytest.raises(ValueError, match="labeled"):
        evaluate(model, head, [LabeledExample("good")], "accuracy", vocab)


def test_predict_labels_shape_and_range(task):
    train, _, vocab, model, head = task
    preds = predict_labels(model, head, [ex.text for ex in train], vocab)
    assert len(preds) == len(train)
    assert set(preds) <= {0, 1}
