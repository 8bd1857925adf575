"""Strategy-level experiment harness: plans, per-seed runs, sweeps, reports.

A plan names a pretraining strategy, the phase step budgets, the paraphrase
count, the fine-tuning grid, and the seeds. Running it executes, per seed:
build the encoder, run the strategy's pretraining phases (each with a fresh
optimizer and schedule), grid-search fine-tune on validation, evaluate the
chosen model on test, and checkpoint it. Everything derives from (config,
seed), so a rerun writes byte-identical result files; wall-clock timings are
segregated into their own file to keep that true.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..corpus import DatasetSplit, Vocabulary, build_vocab, load_dataset_dir, load_jsonl
from ..encoder import ClassifierHead, EncoderModel, desk_config
from ..mlm import PretrainConfig, pretrain
from ..noise import NOISE_KINDS, NoiseSpec, make_noised_testsets
from ..translator import DecodeConfig, TranslatorPair, back_translate_corpus
from .checkpoint import load_translator, save_classifier
from .finetune import FineTuneParams, default_grid, evaluate, grid_search_fine_tune
from .metrics import METRICS, accuracy_gain, mean_and_std
from .plots import grouped_bars, sweep_lines

STRATEGIES = ("BASE", "TAPT", "BT_TAPT", "TAPT_AND_BT", "BT_THEN_TAPT")
SWEEP_AXES = ("pretrain_steps", "k_paraphrases", "train_size")
DEFAULT_K_VALUES = (1, 5, 10, 20, 50)
DEFAULT_TRAIN_SIZES = (100, 500, 1000)


@dataclass(frozen=True)
class ExperimentPlan:
    """Everything one experiment run depends on."""

    strategy: str
    out_dir: str
    dataset_dir: str | None = None
    seeds: tuple = (0, 1, 2, 3, 4)
    metric: str = "accuracy"
    tapt_steps: int = 1000
    bt_steps: int = 1000
    pretrain_lr: float = 5e-5
    pretrain_batch: int = 16
    pretrain_max_len: int = 32
    k_paraphrases: int = 20
    top_p: float = 0.95
    bt_seed: int = 0
    translator_checkpoint: str | None = None
    bt_corpus_path: str | None = None
    train_size: int | None = None
    grid: tuple = field(default_factory=lambda: tuple(default_grid()))
    # In-memory alternatives to the path fields, for library callers.
    dataset: DatasetSplit | None = None
    translators: TranslatorPair | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; "
                             f"expected one of {STRATEGIES}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise ValueError("plan needs at least one seed")
        if len(set(seeds)) != len(seeds):
            raise ValueError(f"seeds must be distinct, got {list(seeds)}")
        object.__setattr__(self, "seeds", seeds)
        grid = tuple(self.grid)
        if not grid:
            raise ValueError("fine-tune grid must be non-empty")
        object.__setattr__(self, "grid", grid)
        if self.tapt_steps < 0 or self.bt_steps < 0:
            raise ValueError("phase step budgets must be >= 0")
        if self.k_paraphrases < 1:
            raise ValueError("k_paraphrases must be >= 1")
        if self.train_size is not None and self.train_size < 1:
            raise ValueError("train_size must be >= 1")
        if self.dataset is None and self.dataset_dir is None:
            raise ValueError("plan needs dataset_dir or an in-memory dataset")

    def uses_bt(self) -> bool:
        return self.strategy in ("BT_TAPT", "TAPT_AND_BT", "BT_THEN_TAPT")

    def config_doc(self) -> dict:
        """JSON-ready echo of the plan (in-memory objects become markers)."""
        return {
            "strategy": self.strategy,
            "out_dir": str(self.out_dir),
            "dataset_dir": self.dataset_dir if self.dataset is None
                           else "<in-memory>",
            "seeds": list(self.seeds),
            "metric": self.metric,
            "tapt_steps": self.tapt_steps,
            "bt_steps": self.bt_steps,
            "pretrain_lr": self.pretrain_lr,
            "pretrain_batch": self.pretrain_batch,
            "pretrain_max_len": self.pretrain_max_len,
            "k_paraphrases": self.k_paraphrases,
            "top_p": self.top_p,
            "bt_seed": self.bt_seed,
            "translator_checkpoint":
                self.translator_checkpoint if self.translators is None
                else "<in-memory>",
            "bt_corpus_path": self.bt_corpus_path,
            "train_size": self.train_size,
            "grid": [{"epochs": g.epochs, "batch_size": g.batch_size,
                      "weight_decay": g.weight_decay, "lr": g.lr,
                      "max_len": g.max_len,
                      "warmup_fraction": g.warmup_fraction}
                     for g in self.grid],
        }


def plan_from_doc(doc: dict, out_dir: str | None = None) -> ExperimentPlan:
    """Build a plan from the JSON document shape emitted by config_doc."""
    doc = dict(doc)
    grid_doc = doc.pop("grid", None)
    grid = (tuple(FineTuneParams(**g) for g in grid_doc)
            if grid_doc else tuple(default_grid()))
    if out_dir is not None:
        doc["out_dir"] = out_dir
    known = {f for f in ExperimentPlan.__dataclass_fields__
             if f not in ("grid", "dataset", "translators")}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown plan fields: {sorted(unknown)}")
    if "seeds" in doc:
        doc["seeds"] = tuple(doc["seeds"])
    return ExperimentPlan(grid=grid, **doc)


@dataclass
class RunResult:
    strategy: str
    metric: str
    per_seed: list          # {"seed", "score", "chosen", "finetune_trace", ...}
    mean: float | None
    std: float | None
    errors: list            # {"seed", "phase", "error"}
    config: dict            # full plan echo
    wall_times: dict        # seconds; segregated at save time

    def doc(self, with_wall_times: bool = False) -> dict:
        out = {
            "strategy": self.strategy,
            "metric": self.metric,
            "per_seed": self.per_seed,
            "mean": self.mean,
            "std": self.std,
            "errors": self.errors,
            "config": self.config,
        }
        if with_wall_times:
            out["wall_times"] = self.wall_times
        return out


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_run_result(result: RunResult, out_dir) -> Path:
    """result.json (deterministic) plus timings.json (wall clock)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "result.json"
    _write_atomic(path, json.dumps(result.doc(), sort_keys=True, indent=2))
    _write_atomic(out_dir / "timings.json",
                  json.dumps(result.wall_times, sort_keys=True, indent=2))
    return path


def _write_trace_csv(path: Path, header: str, rows) -> None:
    lines = [header] + [",".join(repr(v) if isinstance(v, float) else str(v)
                                 for v in row) for row in rows]
    _write_atomic(path, "\n".join(lines) + "\n")


def load_plan_dataset(plan: ExperimentPlan) -> DatasetSplit:
    ds = plan.dataset if plan.dataset is not None \
        else load_dataset_dir(plan.dataset_dir)
    if plan.train_size is not None:
        if plan.train_size > len(ds.train):
            raise ValueError(f"train_size {plan.train_size} exceeds the "
                             f"{len(ds.train)} available training examples")
        ds = DatasetSplit(train=ds.train[:plan.train_size],
                          validation=ds.validation, test=ds.test,
                          unlabeled=ds.unlabeled, class_count=ds.class_count,
                          class_names=ds.class_names)
    return ds


def task_corpus_texts(ds: DatasetSplit) -> list:
    """The unlabeled task text used for adaptive pretraining."""
    pool = ds.unlabeled if ds.unlabeled else ds.train
    return [ex.text for ex in pool]


def _plan_translators(plan: ExperimentPlan) -> TranslatorPair:
    if plan.translators is not None:
        return plan.translators
    if plan.translator_checkpoint:
        return load_translator(plan.translator_checkpoint)
    raise ValueError(f"strategy {plan.strategy} needs back-translation, but "
                     "the plan has neither translators nor a checkpoint path")


def bt_corpus_texts(plan: ExperimentPlan, task_texts: list) -> list:
    """The back-translated corpus, generated or loaded, count-verified."""
    if plan.bt_corpus_path:
        records, _ = load_jsonl(plan.bt_corpus_path, labeled=False)
        texts = [ex.text for ex in records]
    else:
        config = DecodeConfig(strategy="nucleus", top_p=plan.top_p,
                              max_len=plan.pretrain_max_len, seed=plan.bt_seed)
        records = back_translate_corpus(task_texts, plan.k_paraphrases,
                                        _plan_translators(plan), config)
        texts = [r["text"] for r in records]
    expected = plan.k_paraphrases * len(task_texts)
    if len(texts) != expected:
        raise ValueError(f"back-translated corpus has {len(texts)} lines, "
                         f"expected k x |task corpus| = {plan.k_paraphrases} "
                         f"x {len(task_texts)} = {expected}")
    return texts


def strategy_phases(plan: ExperimentPlan, task_texts: list,
                    bt_texts: list | None) -> list:
    """(name, corpus, steps) pretraining phases for the plan's strategy."""
    tapt = ("tapt", task_texts, plan.tapt_steps)
    if plan.strategy == "BASE":
        return []
    if plan.strategy == "TAPT":
        return [tapt]
    bt = ("bt", bt_texts, plan.bt_steps)
    if plan.strategy == "BT_TAPT":
        return [tapt, bt]
    if plan.strategy == "BT_THEN_TAPT":
        return [bt, tapt]
    # TAPT_AND_BT: one pretraining pass over the concatenated corpus, with
    # the combined step budget.
    return [("tapt_and_bt", task_texts + bt_texts,
             plan.tapt_steps + plan.bt_steps)]


def run_experiment(plan: ExperimentPlan) -> RunResult:
    """Execute the plan and write result.json, checkpoints, and traces."""
    t_start = time.perf_counter()
    out_dir = Path(plan.out_dir)
    traces_dir = out_dir / "traces"
    ckpt_dir = out_dir / "checkpoints"
    for d in (out_dir, traces_dir, ckpt_dir):
        d.mkdir(parents=True, exist_ok=True)

    ds = load_plan_dataset(plan)
    task_texts = task_corpus_texts(ds)
    vocab = build_vocab(task_texts + [ex.text for ex in ds.train])
    bt_texts = bt_corpus_texts(plan, task_texts) if plan.uses_bt() else None
    phases = strategy_phases(plan, task_texts, bt_texts)

    per_seed, errors, seed_times = [], [], {}
    for seed in plan.seeds:
        t_seed = time.perf_counter()
        stage = "build"
        try:
            model = EncoderModel.build(desk_config(len(vocab)), seed=seed)
            trace_files = {}
            for name, corpus, steps in phases:
                stage = name
                cfg = PretrainConfig(steps=steps,
                                     batch_size=plan.pretrain_batch,
                                     max_len=plan.pretrain_max_len,
                                     peak_lr=plan.pretrain_lr, seed=seed)
                model, trace = pretrain(model, corpus, cfg, vocab)
                fname = f"seed{seed}_{name}.csv"
                _write_trace_csv(traces_dir / fname, "step,lr,loss", trace)
                trace_files[name] = fname
            stage = "finetune"
            head = ClassifierHead.build(model.config.d_model, ds.class_count,
                                        seed=seed)
            chosen = grid_search_fine_tune(model, head, ds.train,
                                           ds.validation, list(plan.grid),
                                           plan.metric, vocab, seed=seed)
            fname = f"seed{seed}_finetune.csv"
            _write_trace_csv(traces_dir / fname, "epoch,validation_loss",
                             chosen.trace)
            trace_files["finetune"] = fname
            stage = "evaluate"
            score = evaluate(chosen.model, chosen.head, ds.test, plan.metric,
                             vocab, max_len=chosen.chosen.max_len)
            stage = "checkpoint"
            ckpt_name = f"seed{seed}.bttl"
            save_classifier(chosen.model, chosen.head, vocab,
                            ckpt_dir / ckpt_name,
                            extra={"seed": seed, "strategy": plan.strategy})
            per_seed.append({
                "seed": seed,
                "score": score,
                "validation_score": chosen.validation_score,
                "chosen": {"epochs": chosen.chosen.epochs,
                           "batch_size": chosen.chosen.batch_size,
                           "weight_decay": chosen.chosen.weight_decay,
                           "lr": chosen.chosen.lr},
                "finetune_trace": [[e, loss] for e, loss in chosen.trace],
                "traces": trace_files,
                "checkpoint": ckpt_name,
            })
        except Exception as err:  # noqa: BLE001 - per-seed isolation is the contract
            errors.append({"seed": seed, "phase": stage, "error": str(err)})
        seed_times[str(seed)] = time.perf_counter() - t_seed

    scores = [row["score"] for row in per_seed]
    mean, std = mean_and_std(scores) if scores else (None, None)
    result = RunResult(strategy=plan.strategy, metric=plan.metric,
                       per_seed=per_seed, mean=mean, std=std, errors=errors,
                       config=plan.config_doc(),
                       wall_times={"total": time.perf_counter() - t_start,
                                   "per_seed": seed_times})
    save_run_result(result, out_dir)
    return result


def _sweep_plan(plan: ExperimentPlan, axis: str, value: int) -> ExperimentPlan:
    sub_dir = str(Path(plan.out_dir) / f"{axis}_{value}")
    if axis == "pretrain_steps":
        return replace(plan, tapt_steps=value, bt_steps=value, out_dir=sub_dir)
    if axis == "k_paraphrases":
        return replace(plan, k_paraphrases=value, out_dir=sub_dir)
    return replace(plan, train_size=value, out_dir=sub_dir)


def sweep(plan: ExperimentPlan, axis: str, values) -> list:
    """run_experiment per value along one axis; CSV plus SVG per axis.

    Returns the table as a list of {value, mean, std, errors} rows.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of "
                         f"{SWEEP_AXES}")
    values = [int(v) for v in values]
    if values != sorted(values):
        raise ValueError(f"sweep values must be sorted ascending, got {values}")
    out_dir = Path(plan.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = []
    for value in values:
        result = run_experiment(_sweep_plan(plan, axis, value))
        table.append({"value": value, "mean": result.mean, "std": result.std,
                      "errors": len(result.errors)})
    rows = [(row["value"],
             "" if row["mean"] is None else repr(row["mean"]),
             "" if row["std"] is None else repr(row["std"]),
             row["errors"]) for row in table]
    _write_trace_csv(out_dir / f"sweep_{axis}.csv",
                     f"{axis},mean_{plan.metric},std_{plan.metric},errors",
                     rows)
    ok = [row for row in table if row["mean"] is not None]
    sweep_lines([(plan.strategy, [r["value"] for r in ok],
                  [r["mean"] for r in ok], [r["std"] for r in ok])],
                f"{plan.metric} vs {axis} ({plan.strategy})", axis,
                plan.metric, out_dir / f"sweep_{axis}.svg")
    return table


def compare_strategies(plans) -> dict:
    """Run all five strategies on identical data/seeds; CSV + SVG report."""
    plans = list(plans)
    names = [p.strategy for p in plans]
    if sorted(names) != sorted(STRATEGIES):
        raise ValueError(f"compare_strategies needs each of {STRATEGIES} "
                         f"exactly once, got {names}")
    seeds = {p.seeds for p in plans}
    if len(seeds) != 1:
        raise ValueError("plans disagree on seeds; strategy comparison "
                         "requires identical seeds")
    data = {(p.dataset_dir, id(p.dataset) if p.dataset is not None else None)
            for p in plans}
    if len(data) != 1:
        raise ValueError("plans disagree on the dataset; strategy comparison "
                         "requires identical data")
    metrics = {p.metric for p in plans}
    if len(metrics) != 1:
        raise ValueError("plans disagree on the metric")
    metric = plans[0].metric

    results = {p.strategy: run_experiment(p) for p in plans}
    out_dir = Path(plans[0].out_dir).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = [results[name] for name in STRATEGIES]
    rows = []
    for res in ordered:
        rows.append((res.strategy,
                     "" if res.mean is None else repr(res.mean),
                     "" if res.std is None else repr(res.std),
                     ";".join(repr(r["score"]) for r in res.per_seed),
                     len(res.errors)))
    _write_trace_csv(out_dir / "compare.csv",
                     f"strategy,mean_{metric},std_{metric},per_seed,errors",
                     rows)
    ok = [res for res in ordered if res.mean is not None]
    grouped_bars([res.strategy for res in ok],
                 [(metric, [res.mean for res in ok],
                   [res.std for res in ok])],
                 "strategy comparison", "strategy", metric,
                 out_dir / "compare.svg")
    return {name: results[name] for name in STRATEGIES}


def robustness_report(strategy_models: dict, test_examples, vocab: Vocabulary,
                      out_dir, metric: str = "accuracy", seed: int = 0,
                      translators: TranslatorPair | None = None,
                      decode_config: DecodeConfig | None = None,
                      replicates: int = 5, max_len: int = 32) -> dict:
    """Accuracy gain vs BASE on noised test sets, per (noise kind, strategy).

    ``strategy_models`` maps strategy name to a fine-tuned (model, head)
    pair and must include BASE. Every strategy is scored on the same noised
    replicates; bt_beam contributes a single replicate by construction.
    """
    if "BASE" not in strategy_models:
        raise ValueError("robustness_report needs a BASE entry to "
                         "compute gains against")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [n for n in STRATEGIES if n in strategy_models]
    names += [n for n in strategy_models if n not in names]

    report = {}
    csv_rows = []
    for kind in NOISE_KINDS:
        spec = NoiseSpec(kind=kind, seed=seed)
        sets = make_noised_testsets(test_examples, spec,
                                    replicates=replicates,
                                    translators=translators,
                                    decode_config=decode_config)
        scores = {}
        for name in names:
            model, head = strategy_models[name]
            scores[name] = [evaluate(model, head, noised, metric, vocab,
                                     max_len=max_len) for noised in sets]
        report[kind] = {}
        for name in names:
            gains = [accuracy_gain(s, b)
                     for s, b in zip(scores[name], scores["BASE"])]
            mean_gain, std_gain = mean_and_std(gains)
            report[kind][name] = {"scores": scores[name], "gains": gains,
                                  "mean_gain": mean_gain,
                                  "std_gain": std_gain}
            for r, (s, g) in enumerate(zip(scores[name], gains)):
                csv_rows.append((kind, r, name, repr(s), repr(g)))
    _write_trace_csv(out_dir / "robustness.csv",
                     f"noise,replicate,strategy,{metric},gain", csv_rows)
    grouped_bars(list(NOISE_KINDS),
                 [(name, [report[k][name]["mean_gain"] for k in NOISE_KINDS],
                   [report[k][name]["std_gain"] for k in NOISE_KINDS])
                  for name in names],
                 "robustness to test-time noise", "noise kind",
                 f"{metric} gain vs BASE", out_dir / "robustness.svg")
    return report
