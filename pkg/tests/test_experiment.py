"""Experiment harness: plan validation, strategy runs, sweeps, reports."""

import json

import numpy as np
import pytest

from btlab.corpus import DatasetSplit, build_vocab, tokenize
from btlab.encoder import ClassifierHead, EncoderModel, desk_config
from btlab.pipeline.experiment import (
    STRATEGIES,
    ExperimentPlan,
    bt_corpus_texts,
    compare_strategies,
    load_plan_dataset,
    plan_from_doc,
    robustness_report,
    run_experiment,
    save_run_result,
    strategy_phases,
    sweep,
)
from btlab.pipeline.finetune import FineTuneParams
from btlab.pipeline.metrics import mean_and_std
from btlab.pipeline.synthdata import make_task_dataset
from btlab.translator import (
    DecodeConfig,
    build_pivot_spec,
    make_parallel_corpus,
    train_translator,
)

TINY_GRID = (FineTuneParams(epochs=1, batch_size=8, weight_decay=0.0, lr=1e-3),)


@pytest.fixture(scope="module")
def dataset():
    return make_task_dataset(n_train=24, n_validation=12, n_test=16,
                             n_unlabeled=30, seed=7)


@pytest.fixture(scope="module")
def translators(dataset):
    texts = [ex.text for ex in dataset.unlabeled]
    words = sorted({t for text in texts for t in tokenize(text) if t.isalnum()})
    pairs = make_parallel_corpus(texts, build_pivot_spec(words, seed=1))
    return train_translator(pairs, steps=0, seed=0)


def tiny_plan(dataset, out_dir, strategy="BASE", **overrides):
    base = dict(strategy=strategy, out_dir=str(out_dir), dataset=dataset,
                seeds=(0, 1), tapt_steps=3, bt_steps=2, pretrain_lr=1e-4,
                pretrain_batch=8, pretrain_max_len=16, k_paraphrases=1,
                grid=TINY_GRID)
    base.update(overrides)
    return ExperimentPlan(**base)


class TestPlanValidation:
    def test_unknown_strategy_rejected(self, dataset, tmp_path):
        with pytest.raises(ValueError, match="strategy"):
            tiny_plan(dataset, tmp_path, strategy="TAPT_OR_BT")

    def test_duplicate_seeds_rejected(self, dataset, tmp_path):
        with pytest.raises(ValueError, match="distinct"):
            tiny_plan(dataset, tmp_path, seeds=(7, 7))

    def test_empty_seeds_rejected(self, dataset, tmp_path):
        with pytest.raises(ValueError, match="seed"):
            tiny_plan(dataset, tmp_path, seeds=())

    def test_empty_grid_rejected(self, dataset, tmp_path):
        with pytest.raises(ValueError, match="grid"):
            tiny_plan(dataset, tmp_path, grid=())

    def test_unknown_metric_rejected(self, dataset, tmp_path):
        with pytest.raises(ValueError, match="metric"):
            tiny_plan(dataset, tmp_path, metric="f2")

    def test_negative_budget_rejected(self, dataset, tmp_path):
        with pytest.raises(ValueError, match="budget"):
            tiny_plan(dataset, tmp_path, tapt_steps=-1)

    def test_k_below_one_rejected(self, dataset, tmp_path):
        with pytest.raises(ValueError, match="k_paraphrases"):
            tiny_plan(dataset, tmp_path, k_paraphrases=0)

    def test_dataset_required(self, tmp_path):
        with pytest.raises(ValueError, match="dataset"):
            ExperimentPlan(strategy="BASE", out_dir=str(tmp_path))

    def test_uses_bt_flags(self, dataset, tmp_path):
        flags = {name: tiny_plan(dataset, tmp_path, strategy=name).uses_bt()
                 for name in STRATEGIES}
        assert flags == {"BASE": False, "TAPT": False, "BT_TAPT": True,
                         "TAPT_AND_BT": True, "BT_THEN_TAPT": True}


class TestPlanDocs:
    def test_doc_round_trip(self, tmp_path):
        plan = tiny_plan(None, tmp_path, strategy="BT_TAPT", seeds=(3, 5),
                         dataset_dir="/nowhere/ds")
        doc = json.loads(json.dumps(plan.config_doc(), sort_keys=True))
        again = plan_from_doc(doc)
        assert again.strategy == plan.strategy
        assert again.seeds == plan.seeds
        assert again.tapt_steps == plan.tapt_steps
        assert again.bt_steps == plan.bt_steps
        assert again.k_paraphrases == plan.k_paraphrases
        assert again.grid == plan.grid

    def test_doc_rejects_unknown_fields(self, tmp_path):
        doc = {"strategy": "BASE", "out_dir": str(tmp_path),
               "dataset_dir": "/nowhere", "learning_rate_typo": 1.0}
        with pytest.raises(ValueError, match="unknown plan fields"):
            plan_from_doc(doc)

    def test_out_dir_override(self, tmp_path):
        doc = {"strategy": "BASE", "out_dir": "old", "dataset_dir": "/nowhere"}
        assert plan_from_doc(doc, out_dir=str(tmp_path)).out_dir == str(tmp_path)


class TestStrategyPhases:
    def test_phase_lists(self, dataset, tmp_path):
        task, bt = ["t1", "t2"], ["b1"]

        def phases(name):
            return strategy_phases(tiny_plan(dataset, tmp_path, strategy=name),
                                   task, bt)

        assert phases("BASE") == []
        assert phases("TAPT") == [("tapt", task, 3)]
        assert phases("BT_TAPT") == [("tapt", task, 3), ("bt", bt, 2)]
        assert phases("BT_THEN_TAPT") == [("bt", bt, 2), ("tapt", task, 3)]

    def test_tapt_and_bt_concatenates_with_summed_budget(self, dataset, tmp_path):
        plan = tiny_plan(dataset, tmp_path, strategy="TAPT_AND_BT",
                         tapt_steps=7, bt_steps=5)
        [(name, corpus, steps)] = strategy_phases(plan, ["t1"], ["b1", "b2"])
        assert name == "tapt_and_bt"
        assert corpus == ["t1", "b1", "b2"]
        assert steps == 12


class TestBtCorpus:
    def test_generated_count_matches_k_times_corpus(self, dataset, tmp_path,
                                                    translators):
        plan = tiny_plan(dataset, tmp_path, strategy="BT_TAPT",
                         translators=translators, k_paraphrases=2)
        texts = [ex.text for ex in dataset.unlabeled][:5]
        assert len(bt_corpus_texts(plan, texts)) == 10

    def test_loaded_corpus_count_verified(self, dataset, tmp_path):
        path = tmp_path / "bt.jsonl"
        path.write_text('{"text": "one line"}\n{"text": "two line"}\n'
                        '{"text": "three line"}\n', encoding="utf-8")
        plan = tiny_plan(dataset, tmp_path, strategy="BT_TAPT",
                         bt_corpus_path=str(path), k_paraphrases=2)
        with pytest.raises(ValueError, match="k x \\|task corpus\\|"):
            bt_corpus_texts(plan, ["a", "b"])

    def test_bt_strategy_without_translators_rejected(self, dataset, tmp_path):
        plan = tiny_plan(dataset, tmp_path, strategy="BT_TAPT")
        with pytest.raises(ValueError, match="translator"):
            bt_corpus_texts(plan, ["a"])


class TestLoadPlanDataset:
    def test_train_size_takes_prefix(self, dataset, tmp_path):
        plan = tiny_plan(dataset, tmp_path, train_size=4)
        sliced = load_plan_dataset(plan)
        assert [ex.text for ex in sliced.train] == \
            [ex.text for ex in dataset.train[:4]]
        assert len(sliced.validation) == len(dataset.validation)

    def test_train_size_beyond_split_rejected(self, dataset, tmp_path):
        plan = tiny_plan(dataset, tmp_path, train_size=10_000)
        with pytest.raises(ValueError, match="train_size"):
            load_plan_dataset(plan)


class TestRunExperiment:
    def test_base_run_outputs(self, dataset, tmp_path):
        plan = tiny_plan(dataset, tmp_path / "base")
        result = run_experiment(plan)
        assert result.errors == []
        assert [row["seed"] for row in result.per_seed] == [0, 1]
        scores = [row["score"] for row in result.per_seed]
        mean, std = mean_and_std(scores)
        assert result.mean == pytest.approx(mean, abs=1e-12)
        assert result.std == pytest.approx(std, abs=1e-12)
        out = tmp_path / "base"
        assert (out / "result.json").exists()
        assert (out / "timings.json").exists()
        for seed in (0, 1):
            assert (out / "checkpoints" / f"seed{seed}.bttl").exists()
            assert (out / "traces" / f"seed{seed}_finetune.csv").exists()
        doc = json.loads((out / "result.json").read_text())
        assert doc["config"]["strategy"] == "BASE"
        assert "wall_times" not in doc
        timings = json.loads((out / "timings.json").read_text())
        assert set(timings["per_seed"]) == {"0", "1"}

    def test_tapt_run_writes_phase_trace(self, dataset, tmp_path):
        plan = tiny_plan(dataset, tmp_path, strategy="TAPT", seeds=(0,))
        result = run_experiment(plan)
        assert result.errors == []
        trace = (tmp_path / "traces" / "seed0_tapt.csv").read_text().splitlines()
        assert trace[0] == "step,lr,loss"
        assert len(trace) == 1 + plan.tapt_steps
        assert result.per_seed[0]["traces"]["tapt"] == "seed0_tapt.csv"

    def test_bt_tapt_runs_both_phases(self, dataset, tmp_path, translators):
        plan = tiny_plan(dataset, tmp_path, strategy="BT_TAPT", seeds=(0,),
                         translators=translators)
        result = run_experiment(plan)
        assert result.errors == []
        assert (tmp_path / "traces" / "seed0_tapt.csv").exists()
        assert (tmp_path / "traces" / "seed0_bt.csv").exists()

    def test_identical_plans_give_identical_results(self, dataset, tmp_path):
        plan_a = tiny_plan(dataset, tmp_path / "a", seeds=(0,))
        plan_b = tiny_plan(dataset, tmp_path / "b", seeds=(0,))
        run_experiment(plan_a)
        run_experiment(plan_b)
        read = lambda p: (p / "result.json").read_bytes()  # noqa: E731
        a_doc = json.loads(read(tmp_path / "a"))
        b_doc = json.loads(read(tmp_path / "b"))
        a_doc["config"]["out_dir"] = b_doc["config"]["out_dir"] = ""
        assert a_doc == b_doc
        assert (tmp_path / "a" / "checkpoints" / "seed0.bttl").read_bytes() == \
            (tmp_path / "b" / "checkpoints" / "seed0.bttl").read_bytes()

    def test_per_seed_failures_recorded_and_isolated(self, dataset, tmp_path):
        bad_grid = (FineTuneParams(epochs=1, batch_size=8, weight_decay=0.0,
                                   lr=1e-3, max_len=128),)
        plan = tiny_plan(dataset, tmp_path, grid=bad_grid)
        result = run_experiment(plan)
        assert result.per_seed == []
        assert result.mean is None and result.std is None
        assert [e["seed"] for e in result.errors] == [0, 1]
        assert all(e["phase"] == "finetune" for e in result.errors)
        assert (tmp_path / "result.json").exists()


class TestSaveRunResult:
    def test_wall_times_segregated(self, dataset, tmp_path):
        plan = tiny_plan(dataset, tmp_path)
        from btlab.pipeline.experiment import RunResult
        result = RunResult(strategy="BASE", metric="accuracy",
                           per_seed=[{"seed": 0, "score": 0.5}],
                           mean=0.5, std=0.0, errors=[],
                           config=plan.config_doc(),
                           wall_times={"total": 1.25, "per_seed": {"0": 1.25}})
        save_run_result(result, tmp_path)
        doc = json.loads((tmp_path / "result.json").read_text())
        assert "wall_times" not in doc
        timings = json.loads((tmp_path / "timings.json").read_text())
        assert timings["total"] == 1.25


class TestSweep:
    def test_unknown_axis_rejected(self, dataset, tmp_path):
        with pytest.raises(ValueError, match="axis"):
            sweep(tiny_plan(dataset, tmp_path), "dropout", [1, 2])

    def test_unsorted_values_rejected(self, dataset, tmp_path):
        with pytest.raises(ValueError, match="ascending"):
            sweep(tiny_plan(dataset, tmp_path), "train_size", [8, 4])

    def test_empty_values_runs_nothing(self, dataset, tmp_path):
        table = sweep(tiny_plan(dataset, tmp_path), "k_paraphrases", [])
        assert table == []
        csv = (tmp_path / "sweep_k_paraphrases.csv").read_text().splitlines()
        assert len(csv) == 1
        assert (tmp_path / "sweep_k_paraphrases.svg").exists()
        assert not list(tmp_path.glob("k_paraphrases_*"))

    def test_train_size_axis_runs_per_value(self, dataset, tmp_path):
        plan = tiny_plan(dataset, tmp_path, seeds=(0,))
        table = sweep(plan, "train_size", [8, 16])
        assert [row["value"] for row in table] == [8, 16]
        assert all(row["mean"] is not None for row in table)
        for value in (8, 16):
            sub = json.loads(
                (tmp_path / f"train_size_{value}" / "result.json").read_text())
            assert sub["config"]["train_size"] == value
        csv = (tmp_path / "sweep_train_size.csv").read_text().splitlines()
        assert csv[0] == "train_size,mean_accuracy,std_accuracy,errors"
        assert len(csv) == 3
        assert (tmp_path / "sweep_train_size.svg").exists()

    def test_pretrain_steps_axis_sets_both_budgets(self, dataset, tmp_path):
        plan = tiny_plan(dataset, tmp_path, strategy="TAPT", seeds=(0,))
        sweep(plan, "pretrain_steps", [2])
        sub = json.loads(
            (tmp_path / "pretrain_steps_2" / "result.json").read_text())
        assert sub["config"]["tapt_steps"] == 2
        assert sub["config"]["bt_steps"] == 2


class TestCompareStrategies:
    def test_missing_strategy_rejected(self, dataset, tmp_path):
        plans = [tiny_plan(dataset, tmp_path / n, strategy=n)
                 for n in ("BASE", "TAPT", "BT_TAPT", "TAPT_AND_BT")]
        with pytest.raises(ValueError, match="exactly once"):
            compare_strategies(plans)

    def test_mismatched_seeds_rejected(self, dataset, tmp_path):
        plans = [tiny_plan(dataset, tmp_path / n, strategy=n)
                 for n in STRATEGIES]
        plans[2] = tiny_plan(dataset, tmp_path / "BT_TAPT",
                             strategy="BT_TAPT", seeds=(0, 2))
        with pytest.raises(ValueError, match="seeds"):
            compare_strategies(plans)

    def test_mismatched_metric_rejected(self, dataset, tmp_path):
        plans = [tiny_plan(dataset, tmp_path / n, strategy=n)
                 for n in STRATEGIES]
        plans[1] = tiny_plan(dataset, tmp_path / "TAPT", strategy="TAPT",
                             metric="macro_f1")
        with pytest.raises(ValueError, match="metric"):
            compare_strategies(plans)

    def test_all_five_reported_once(self, dataset, tmp_path, translators):
        plans = [tiny_plan(dataset, tmp_path / n, strategy=n, seeds=(0,),
                           translators=translators)
                 for n in STRATEGIES]
        results = compare_strategies(plans)
        assert list(results) == list(STRATEGIES)
        assert all(res.mean is not None for res in results.values())
        csv = (tmp_path / "compare.csv").read_text().splitlines()
        assert len(csv) == 6
        assert [line.split(",")[0] for line in csv[1:]] == list(STRATEGIES)
        assert (tmp_path / "compare.svg").exists()


@pytest.fixture(scope="module")
def strategy_models(dataset):
    vocab = build_vocab([ex.text for ex in dataset.unlabeled])
    models = {}
    for i, name in enumerate(("BASE", "TAPT")):
        model = EncoderModel.build(desk_config(len(vocab)), seed=i)
        head = ClassifierHead.build(model.config.d_model, 2, seed=i)
        models[name] = (model, head)
    return vocab, models


class TestRobustnessReport:
    def test_needs_base(self, dataset, strategy_models, tmp_path):
        vocab, models = strategy_models
        with pytest.raises(ValueError, match="BASE"):
            robustness_report({"TAPT": models["TAPT"]}, dataset.test, vocab,
                              tmp_path)

    def test_report_shape_and_base_zeros(self, dataset, strategy_models,
                                         tmp_path, translators):
        vocab, models = strategy_models
        decode = DecodeConfig(strategy="nucleus", top_p=0.95, max_len=16,
                              seed=0)
        report = robustness_report(models, dataset.test[:10], vocab, tmp_path,
                                   translators=translators,
                                   decode_config=decode, replicates=2,
                                   max_len=16)
        assert set(report) == {"synonym", "bt_beam", "bt_topp", "char_swap",
                               "inv_test"}
        for kind, by_strategy in report.items():
            expected = 1 if kind == "bt_beam" else 2
            for name in ("BASE", "TAPT"):
                assert len(by_strategy[name]["gains"]) == expected
            assert by_strategy["BASE"]["gains"] == [0.0] * expected
            assert by_strategy["BASE"]["mean_gain"] == 0.0
        csv = (tmp_path / "robustness.csv").read_text().splitlines()
        assert csv[0] == "noise,replicate,strategy,accuracy,gain"
        assert len(csv) == 1 + (4 * 2 + 1) * 2
        assert (tmp_path / "robustness.svg").exists()
