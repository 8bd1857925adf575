"""btlab command line: data prep, phase-level steps, and full experiments.

Heavy imports happen inside handlers so that --threads can pin the BLAS
thread pools before numpy first loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _read_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise SystemExit(f"--config {args.config}: expected a JSON object")
    return doc


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True, indent=2))


def _read_texts(path) -> list:
    """Sentences from a JSONL dataset file or a plain one-per-line text file."""
    from ..corpus import load_jsonl
    path = Path(path)
    if path.suffix == ".jsonl":
        examples, _ = load_jsonl(path, labeled=False)
        return [ex.text for ex in examples]
    return [line for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip()]


def _load_vocab_file(path):
    from ..corpus import Vocabulary
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return Vocabulary(doc["tokens"])


def _translator_words(texts) -> list:
    """Alphanumeric token set a pivot cipher should cover."""
    from ..corpus import tokenize
    words = set()
    for text in texts:
        words.update(t for t in tokenize(text) if t.isalnum())
    return sorted(words)


def cmd_build_vocab(args) -> int:
    from ..corpus import build_vocab
    texts = _read_texts(args.corpus)
    vocab = build_vocab(texts, min_freq=args.min_freq, max_size=args.max_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"tokens": list(vocab.tokens)}, indent=2),
                   encoding="utf-8")
    _emit({"vocab": str(out), "size": len(vocab)})
    return 0


def cmd_gen_data(args) -> int:
    from ..corpus import save_dataset_dir
    from .synthdata import make_task_dataset
    ds = make_task_dataset(n_train=args.train, n_validation=args.validation,
                           n_test=args.test, n_unlabeled=args.unlabeled,
                           seed=args.seed)
    save_dataset_dir(ds, args.out_dir)
    _emit({"out_dir": args.out_dir, "train": len(ds.train),
           "validation": len(ds.validation), "test": len(ds.test),
           "unlabeled": len(ds.unlabeled), "seed": args.seed})
    return 0


def cmd_train_translator(args) -> int:
    from ..translator import build_pivot_spec, make_parallel_corpus, train_translator
    from .checkpoint import save_translator
    from .synthdata import generate_corpus
    if args.corpus:
        sentences = _read_texts(args.corpus)
    else:
        sentences = generate_corpus(args.pairs, seed=args.seed)
    sentences = sentences[: args.pairs]
    spec = build_pivot_spec(_translator_words(sentences), seed=args.pivot_seed)
    pairs = make_parallel_corpus(sentences, spec)
    translators = train_translator(pairs, steps=args.steps, seed=args.seed,
                                   peak_lr=args.lr,
                                   weight_decay=args.weight_decay,
                                   label_smoothing=args.label_smoothing)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_translator(translators, out,
                    extra={"steps": args.steps, "pairs": len(pairs),
                           "seed": args.seed, "pivot_seed": args.pivot_seed})
    for name, trace in (("fwd", translators.fwd_trace),
                        ("rev", translators.rev_trace)):
        lines = ["step,lr,loss"] + [f"{s},{lr!r},{loss!r}"
                                    for s, lr, loss in trace]
        out.with_name(out.stem + f"_{name}_trace.csv").write_text(
            "\n".join(lines) + "\n", encoding="utf-8")
    _emit({"checkpoint": str(out), "pairs": len(pairs), "steps": args.steps,
           "final_loss": {"fwd": translators.fwd_trace[-1][2],
                          "rev": translators.rev_trace[-1][2]}
                         if translators.fwd_trace else None})
    return 0


def cmd_backtranslate(args) -> int:
    from ..translator import DecodeConfig, back_translate_corpus
    from .checkpoint import load_translator
    translators = load_translator(args.translator)
    texts = _read_texts(args.corpus)
    config = DecodeConfig(strategy=args.strategy, top_p=args.top_p,
                          beam_width=args.beam_width, max_len=args.max_len,
                          seed=args.seed)
    records = back_translate_corpus(texts, args.k, translators, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    _emit({"out": str(out), "sentences": len(texts), "k": args.k,
           "lines": len(records)})
    return 0


def cmd_pretrain(args) -> int:
    from ..corpus import build_vocab, load_dataset_dir
    from ..encoder import EncoderModel, desk_config
    from ..mlm import PretrainConfig, pretrain
    from .checkpoint import load_encoder, save_encoder
    if args.corpus:
        texts = _read_texts(args.corpus)
    elif args.dataset_dir:
        ds = load_dataset_dir(args.dataset_dir)
        pool = ds.unlabeled if ds.unlabeled else ds.train
        texts = [ex.text for ex in pool]
    else:
        raise SystemExit("pretrain needs --corpus or --dataset-dir")
    if args.encoder:
        model, vocab, _ = load_encoder(args.encoder)
    else:
        vocab = (_load_vocab_file(args.vocab) if args.vocab
                 else build_vocab(texts))
        model = EncoderModel.build(desk_config(len(vocab)), seed=args.seed)
    config = PretrainConfig(steps=args.steps, batch_size=args.batch_size,
                            max_len=args.max_len, peak_lr=args.lr,
                            seed=args.seed)
    model, trace = pretrain(model, texts, config, vocab)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_encoder(model, vocab, out, extra={"steps": args.steps,
                                           "seed": args.seed})
    lines = ["step,lr,loss"] + [f"{s},{lr!r},{loss!r}" for s, lr, loss in trace]
    out.with_name(out.stem + "_trace.csv").write_text("\n".join(lines) + "\n",
                                                      encoding="utf-8")
    _emit({"checkpoint": str(out), "steps": args.steps,
           "chunks": len(texts),
           "final_loss": trace[-1][2] if trace else None})
    return 0


def cmd_finetune(args) -> int:
    from ..corpus import build_vocab, load_dataset_dir
    from ..encoder import ClassifierHead, EncoderModel, desk_config
    from .checkpoint import load_encoder, save_classifier
    from .finetune import default_grid, grid_search_fine_tune
    ds = load_dataset_dir(args.dataset_dir)
    if args.encoder:
        model, vocab, _ = load_encoder(args.encoder)
    else:
        vocab = build_vocab([ex.text for ex in ds.unlabeled + ds.train])
        model = EncoderModel.build(desk_config(len(vocab)), seed=args.seed)
    head = ClassifierHead.build(model.config.d_model, ds.class_count,
                                seed=args.seed)
    result = grid_search_fine_tune(model, head, ds.train, ds.validation,
                                   default_grid(lr=args.lr), args.metric,
                                   vocab, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_classifier(result.model, result.head, vocab, out,
                    extra={"seed": args.seed, "metric": args.metric})
    lines = ["epochs,batch_size,weight_decay,lr,validation_score"]
    lines += [f"{p.epochs},{p.batch_size},{p.weight_decay!r},{p.lr!r},{s!r}"
              for p, s in result.table]
    out.with_name(out.stem + "_grid.csv").write_text("\n".join(lines) + "\n",
                                                     encoding="utf-8")
    _emit({"checkpoint": str(out), "metric": args.metric,
           "validation_score": result.validation_score,
           "chosen": {"epochs": result.chosen.epochs,
                      "batch_size": result.chosen.batch_size,
                      "weight_decay": result.chosen.weight_decay,
                      "lr": result.chosen.lr}})
    return 0


def cmd_evaluate(args) -> int:
    from ..corpus import load_dataset_dir
    from .checkpoint import load_classifier
    from .finetune import evaluate
    model, head, vocab, _ = load_classifier(args.classifier)
    ds = load_dataset_dir(args.dataset_dir)
    examples = getattr(ds, args.split)
    score = evaluate(model, head, examples, args.metric, vocab,
                     max_len=args.max_len)
    _emit({"split": args.split, "metric": args.metric, "score": score,
           "examples": len(examples)})
    return 0


def cmd_noise(args) -> int:
    from ..corpus import load_dataset_dir, save_jsonl
    from ..noise import NoiseSpec, make_noised_testsets
    from ..translator import DecodeConfig
    from .checkpoint import load_translator
    ds = load_dataset_dir(args.dataset_dir)
    examples = getattr(ds, args.split)
    spec = NoiseSpec(kind=args.kind, probability=args.probability,
                     seed=args.seed)
    translators = load_translator(args.translator) if args.translator else None
    decode = DecodeConfig(strategy="beam" if args.kind == "bt_beam"
                          else "nucleus", top_p=spec.probability or 0.95,
                          max_len=args.max_len, seed=args.seed) \
        if translators else None
    sets = make_noised_testsets(examples, spec, replicates=args.replicates,
                                translators=translators, decode_config=decode,
                                split_name=args.split)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r, noised in enumerate(sets):
        path = out_dir / f"noise_{args.kind}_r{r}.jsonl"
        save_jsonl(noised, path)
        paths.append(str(path))
    _emit({"kind": args.kind, "replicates": len(sets), "files": paths})
    return 0


def _plan_from_args(args, out_dir=None):
    from .experiment import plan_from_doc
    doc = _read_config(args)
    if not doc:
        raise SystemExit("this subcommand needs --config with an "
                         "experiment plan")
    if getattr(args, "strategy", None):
        doc["strategy"] = args.strategy
    if out_dir is None:
        out_dir = args.out_dir or doc.get("out_dir")
    if not out_dir:
        raise SystemExit("no output directory: pass --out-dir or put "
                         "out_dir in the config")
    return plan_from_doc(doc, out_dir=str(out_dir))


def cmd_experiment(args) -> int:
    from .experiment import run_experiment
    plan = _plan_from_args(args)
    result = run_experiment(plan)
    _emit({"strategy": result.strategy, "metric": result.metric,
           "mean": result.mean, "std": result.std,
           "seeds_completed": len(result.per_seed),
           "errors": result.errors,
           "out_dir": plan.out_dir})
    return 1 if result.errors else 0


def cmd_sweep(args) -> int:
    from .experiment import sweep
    plan = _plan_from_args(args)
    values = [int(v) for v in args.values.split(",")] if args.values else []
    table = sweep(plan, args.axis, values)
    _emit({"axis": args.axis, "table": table, "out_dir": plan.out_dir})
    return 0


def cmd_compare(args) -> int:
    from dataclasses import replace

    from .experiment import STRATEGIES, compare_strategies
    base = _plan_from_args(args)
    root = Path(base.out_dir)
    plans = [replace(base, strategy=name, out_dir=str(root / name))
             for name in STRATEGIES]
    results = compare_strategies(plans)
    _emit({name: {"mean": res.mean, "std": res.std,
                  "errors": len(res.errors)}
           for name, res in results.items()})
    return 0


def cmd_robustness(args) -> int:
    from ..corpus import load_dataset_dir
    from ..translator import DecodeConfig
    from .checkpoint import load_classifier, load_translator
    from .experiment import STRATEGIES, robustness_report
    ds = load_dataset_dir(args.dataset_dir)
    models, vocab = {}, None
    for name in STRATEGIES:
        path = Path(args.compare_dir) / name / "checkpoints" / \
            f"seed{args.seed}.bttl"
        if not path.exists():
            raise SystemExit(f"missing checkpoint for {name}: {path}")
        model, head, vocab, _ = load_classifier(path)
        models[name] = (model, head)
    translators = load_translator(args.translator) if args.translator else None
    decode = DecodeConfig(strategy="nucleus", top_p=0.95,
                          max_len=args.max_len, seed=args.seed) \
        if translators else None
    report = robustness_report(models, getattr(ds, args.split), vocab,
                               args.out_dir, metric=args.metric,
                               seed=args.seed, translators=translators,
                               decode_config=decode,
                               replicates=args.replicates,
                               max_len=args.max_len)
    _emit({kind: {name: entry["mean_gain"] for name, entry in by.items()}
           for kind, by in report.items()})
    return 0


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="btlab",
        description="Back-translated task-adaptive pretraining workbench.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file mirroring ExperimentPlan")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("--threads", type=int,
                        help="cap BLAS/OpenMP thread pools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", parents=[common],
                       help="frequency-ranked vocabulary from a corpus file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--max-size", type=int, default=2048)
    p.set_defaults(handler=cmd_build_vocab)

    p = sub.add_parser("gen-data", parents=[common],
                       help="synthetic keyword-sentiment task dataset")
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--validation", type=int, default=100)
    p.add_argument("--test", type=int, default=500)
    p.add_argument("--unlabeled", type=int, default=1000)
    p.set_defaults(handler=cmd_gen_data, _needs_out_dir=True)

    p = sub.add_parser("train-translator", parents=[common],
                       help="train the toy pivot-language translator pair")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", help="source sentences (default: synthetic)")
    p.add_argument("--pairs", type=int, default=2000)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.add_argument("--pivot-seed", type=int, default=1)
    p.set_defaults(handler=cmd_train_translator)

    p = sub.add_parser("backtranslate", parents=[common],
                       help="round-trip paraphrases of a corpus")
    p.add_argument("--translator", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--strategy", default="nucleus",
                   choices=("greedy", "beam", "nucleus"))
    p.add_argument("--top-p", type=float, default=0.95)
    p.add_argument("--beam-width", type=int, default=4)
    p.add_argument("--max-len", type=int, default=24)
    p.set_defaults(handler=cmd_backtranslate)

    p = sub.add_parser("pretrain", parents=[common],
                       help="one masked-language-model pretraining phase")
    p.add_argument("--corpus")
    p.add_argument("--dataset-dir")
    p.add_argument("--out", required=True)
    p.add_argument("--encoder", help="continue from this encoder checkpoint")
    p.add_argument("--vocab", help="vocabulary JSON from build-vocab")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--lr", type=float, default=5e-5)
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common],
                       help="grid-search fine-tune a classifier")
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--encoder", help="pretrained encoder checkpoint")
    p.add_argument("--metric", default="accuracy",
                   choices=("accuracy", "macro_f1"))
    p.add_argument("--lr", type=float, default=2e-5)
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score a classifier checkpoint on a split")
    p.add_argument("--classifier", required=True)
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--split", default="test",
                   choices=("train", "validation", "test"))
    p.add_argument("--metric", default="accuracy",
                   choices=("accuracy", "macro_f1"))
    p.add_argument("--max-len", type=int, default=32)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("noise", parents=[common],
                       help="emit noised copies of a labeled split")
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--split", default="test",
                   choices=("train", "validation", "test"))
    p.add_argument("--kind", required=True,
                   choices=("synonym", "bt_beam", "bt_topp", "char_swap",
                            "inv_test"))
    p.add_argument("--replicates", type=int, default=5)
    p.add_argument("--probability", type=float)
    p.add_argument("--translator", help="needed for bt_beam / bt_topp")
    p.add_argument("--max-len", type=int, default=24)
    p.set_defaults(handler=cmd_noise, _needs_out_dir=True)

    p = sub.add_parser("experiment", parents=[common],
                       help="run one strategy end to end from a config")
    p.add_argument("--strategy",
                   choices=("BASE", "TAPT", "BT_TAPT", "TAPT_AND_BT",
                            "BT_THEN_TAPT"))
    p.set_defaults(handler=cmd_experiment)

    p = sub.add_parser("sweep", parents=[common],
                       help="run_experiment along one axis")
    p.add_argument("--axis", required=True,
                   choices=("pretrain_steps", "k_paraphrases", "train_size"))
    p.add_argument("--values", required=True,
                   help="comma-separated ascending integers")
    p.add_argument("--strategy",
                   choices=("BASE", "TAPT", "BT_TAPT", "TAPT_AND_BT",
                            "BT_THEN_TAPT"))
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("compare", parents=[common],
                       help="all five strategies on identical data and seeds")
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("robustness", parents=[common],
                       help="accuracy gains vs BASE on noised test sets")
    p.add_argument("--compare-dir", required=True,
                   help="output directory of a previous compare run")
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--translator", help="needed for bt_beam / bt_topp noise")
    p.add_argument("--split", default="test",
                   choices=("train", "validation", "test"))
    p.add_argument("--metric", default="accuracy",
                   choices=("accuracy", "macro_f1"))
    p.add_argument("--replicates", type=int, default=5)
    p.add_argument("--max-len", type=int, default=32)
    p.set_defaults(handler=cmd_robustness)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.threads:
        if "numpy" in sys.modules:
            print("warning: numpy already imported; --threads may not "
                  "take full effect", file=sys.stderr)
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    if getattr(args, "_needs_out_dir", False) and not args.out_dir:
        raise SystemExit(f"{args.command} needs --out-dir")
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
