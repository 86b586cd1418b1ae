"""Command-line entry point for the full two-stage workflow.

Subcommands: ``synth`` (corpus generation), ``pretrain`` (masked-LM loop),
``prompt-filter`` (train/apply the binary refute filter), ``finetune``
(cross-validated supervised training, writes the out-of-fold matrix),
``ensemble`` (stacker training / snapshot runs), ``predict`` (method 1:
stacked 5-class; method 2: two-stage), and ``evaluate`` (F1 report).

Exit codes: 0 success, 1 usage/config error, 2 data error. Every run writes
a ``manifest-<command>.json`` recording the config hash, the seeds in play,
and the package version; reruns with identical manifests produce identical
prediction files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .corpus import (
    ALL_LABELS, CSV_HEADER, Dataset, DatasetError, FoldAssignment, Label,
    NON_REFUTE_LABELS, generate_synthetic, load_dataset, preprocess_instance,
    save_dataset, stratified_kfold,
)
from .encoder import EncoderParams, init_params, load_checkpoint, save_checkpoint
from .ensemble import (
    load_stacker, mean_ensemble, save_stacker, snapshot_predict,
    snapshot_train, stacker_predict, train_stacker,
)
from .metrics import confusion, weighted_f1
from .mlm import pretrain
from .pipeline import (
    ClassifierModel, ModelSpec, crossval_train, predict_batch,
    read_oof_csv, two_stage_predict, write_oof_csv,
)
from .prompt import (
    FilterModel, PromptTemplate, Verbalizer, refute_filter_predict,
    refute_filter_train,
)
from .report import (
    format_metrics_table, plot_confusion_heatmap, plot_loss_curve,
    write_loss_trace, write_metrics_csv,
)
from .tokenizer import Vocabulary, build_vocab

__all__ = ["run", "main", "UsageError"]


class UsageError(Exception):
    pass


class _ArgParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        raise UsageError(f"{message}\n{self.format_usage()}")


def _build_parser() -> _ArgParser:
    parser = _ArgParser(prog="factstack", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_ArgParser)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--vocab-size", type=int, default=600)
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("pretrain", help="masked-LM pretraining over the train corpus")
    p.add_argument("--config", required=True)

    p = sub.add_parser("finetune", help="cross-validated supervised finetuning")
    p.add_argument("--config", required=True)
    p.add_argument("--classes", type=int, choices=(4, 5), default=5)

    p = sub.add_parser("prompt-filter", help="train or apply the binary refute filter")
    psub = p.add_subparsers(dest="action", parser_class=_ArgParser)
    pt = psub.add_parser("train")
    pt.add_argument("--config", required=True)
    pa = psub.add_parser("apply")
    pa.add_argument("--config", required=True)
    pa.add_argument("--input", required=True)
    pa.add_argument("--out", required=True)

    p = sub.add_parser("ensemble", help="stacker training / snapshot run")
    esub = p.add_subparsers(dest="action", parser_class=_ArgParser)
    es = esub.add_parser("stacker")
    es.add_argument("--config", required=True)
    en = esub.add_parser("snapshot")
    en.add_argument("--config", required=True)
    en.add_argument("--classes", type=int, choices=(4, 5), default=5)
    en.add_argument("--input")
    en.add_argument("--out")

    p = sub.add_parser("predict", help="write id,category predictions")
    p.add_argument("--config", required=True)
    p.add_argument("--method", type=int, choices=(1, 2), required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="confusion matrix and F1 report")
    p.add_argument("--golds", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--classes", type=int, choices=(4, 5), default=5)

    return parser


# ---------------------------------------------------------------------------
# shared helpers

def _write_manifest(out_dir: Path, command: str, config_text: str,
                    seeds: dict[str, int]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(config_text.encode("utf-8")).hexdigest(),
        "seeds": seeds,
        "version": __version__,
    }
    path = out_dir / f"manifest-{command}.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _load_any(path: str | Path) -> Dataset:
    """Load a dataset CSV whether or not it carries the category column."""
    with Path(path).open(encoding="utf-8") as fh:
        first = fh.readline().strip()
    return load_dataset(path, has_labels=(first.split(",") == CSV_HEADER))


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DatasetError(f"{path} not found; {hint}")
    return path


def _load_vocab(cfg: RunConfig) -> Vocabulary:
    return Vocabulary.load(_require(cfg.vocab_path, "run `factstack pretrain` first"))


def _classes_for(n: int) -> tuple[Label, ...]:
    return ALL_LABELS if n == 5 else NON_REFUTE_LABELS


def _models_dir(cfg: RunConfig, n_classes: int) -> Path:
    return cfg.output_dir / f"models{n_classes}"


def _oof_path(cfg: RunConfig, n_classes: int) -> Path:
    return cfg.output_dir / f"oof{n_classes}.csv"


def _base_params(cfg: RunConfig, vocab: Vocabulary, fallback_seed: int) -> EncoderParams:
    """The pretrained checkpoint when available, else a fresh initialization."""
    ckpt = cfg.pretrained_path
    if ckpt.exists():
        params = load_checkpoint(ckpt)
        if params.config.vocab_size != vocab.size:
            raise DatasetError(
                f"{ckpt}: checkpoint vocabulary size {params.config.vocab_size} "
                f"!= vocabulary file size {vocab.size}"
            )
        return params
    return init_params(cfg.encoder_config(vocab.size, n_classes=5), fallback_seed)


def _build_specs(cfg: RunConfig, vocab: Vocabulary) -> list[ModelSpec]:
    ckpt = cfg.pretrained_path
    base = None
    if ckpt.exists():
        base = load_checkpoint(ckpt)
        if base.config.vocab_size != vocab.size:
            raise DatasetError(f"{ckpt}: checkpoint does not match the vocabulary file")
    specs = []
    for name, overrides, seed in cfg.model_specs():
        if base is not None:
            enc = base.config
            for key in ("max_len", "d_model", "n_heads", "n_layers", "d_ff"):
                if key in overrides and overrides[key] != getattr(enc, key):
                    raise DatasetError(
                        f"[model.{name}] overrides {key} but a pretrained checkpoint "
                        f"fixes the architecture; drop the override or the checkpoint"
                    )
            specs.append(ModelSpec(name=name, config=enc, seed=seed, base_params=base))
        else:
            enc = cfg.encoder_config(vocab.size, n_classes=5, overrides=overrides)
            specs.append(ModelSpec(name=name, config=enc, seed=seed))
    return specs


def _filter_paths(cfg: RunConfig) -> tuple[Path, Path]:
    return cfg.output_dir / "filter.ckpt", cfg.output_dir / "filter.json"


def _load_filter(cfg: RunConfig) -> tuple[FilterModel, float]:
    ckpt_path, meta_path = _filter_paths(cfg)
    _require(ckpt_path, "run `factstack prompt-filter train` first")
    _require(meta_path, "run `factstack prompt-filter train` first")
    vocab = _load_vocab(cfg)
    params = load_checkpoint(ckpt_path)
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    model = FilterModel(
        params=params, vocab=vocab,
        template=PromptTemplate(meta["template"]),
        verbalizer=Verbalizer.from_words(vocab, meta["negative_words"], meta["positive_words"]),
    )
    return model, float(meta["threshold"])


def _write_predictions(rows: list[tuple[str, Label]], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "category"])
        for inst_id, label in rows:
            writer.writerow([inst_id, label.canonical_name])


def _read_predictions(path: str | Path) -> dict[str, Label]:
    path = Path(path)
    _require(path, "expected an id,category predictions file")
    out: dict[str, Label] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "category"]:
            raise DatasetError(f"{path}: expected header id,category, got {header}")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DatasetError(f"{path}: row {row_no}: expected 2 fields")
            out[row[0]] = Label.from_string(row[1])
    return out


def _restrict_folds(folds: FoldAssignment, keep: list[int]) -> FoldAssignment:
    return FoldAssignment(
        k=folds.k, assignment=[folds.assignment[i] for i in keep], seed=folds.seed,
    )


# ---------------------------------------------------------------------------
# subcommand implementations

def _cmd_synth(args) -> int:
    ds = generate_synthetic(args.classes, args.per_class, args.vocab_size, args.seed)
    out = Path(args.out)
    save_dataset(ds, out)
    arg_text = f"synth classes={args.classes} per_class={args.per_class} " \
               f"vocab_size={args.vocab_size} seed={args.seed}"
    _write_manifest(out.parent, "synth", arg_text, {"synth.seed": args.seed})
    print(f"wrote {len(ds)} instances to {out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    train_path = cfg.path("train")
    if train_path is None:
        raise ConfigError("[paths] train is required for pretraining")
    ds = load_dataset(_require(train_path, "set [paths] train"), has_labels=True)
    texts = [preprocess_instance(inst) for inst in ds]
    vocab = build_vocab(texts, max_size=cfg.get("encoder", "vocab_size"), min_freq=1)
    vocab.save(cfg.vocab_path)

    enc = cfg.encoder_config(vocab.size, n_classes=5)
    params, trace = pretrain(
        ds, vocab, enc,
        train=cfg.train_config("pretrain"), masking=cfg.masking_config(),
    )
    save_checkpoint(params, cfg.pretrained_path)
    write_loss_trace(trace, cfg.output_dir / "pretrain_trace.csv")
    plot_loss_curve(trace, cfg.output_dir / "pretrain_loss.png", title="masked-LM pretraining loss")
    _write_manifest(cfg.output_dir, "pretrain", cfg.source_text, cfg.seeds())
    print(f"pretrained {len(trace)} steps; vocab size {vocab.size}; "
          f"final loss {trace[-1][2]:.4f}; checkpoint at {cfg.pretrained_path}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(_require(cfg.path("train"), "set [paths] train"), has_labels=True)
    vocab = _load_vocab(cfg)
    folds = stratified_kfold(ds, cfg.get("cv", "k"), cfg.get("cv", "seed"))

    classes = _classes_for(args.classes)
    if args.classes == 4:
        keep = [i for i, inst in enumerate(ds) if inst.label is not Label.REFUTE]
        ds = Dataset([ds[i] for i in keep], provenance=ds.provenance)
        folds = _restrict_folds(folds, keep)

    specs = _build_specs(cfg, vocab)
    result = crossval_train(ds, folds, specs, classes, vocab, cfg.train_config("finetune"))

    models_dir = _models_dir(cfg, args.classes)
    for (name, fold), model in result.models.items():
        save_checkpoint(model.params, models_dir / f"{name}_fold{fold}.ckpt")
    write_oof_csv(result.oof, _oof_path(cfg, args.classes))

    combined = cfg.output_dir / f"finetune{args.classes}_trace.csv"
    combined.parent.mkdir(parents=True, exist_ok=True)
    with combined.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["spec", "fold", "step", "lr", "loss"])
        for (name, fold), trace in result.traces.items():
            for step, lr, loss in trace:
                writer.writerow([name, fold, step, repr(float(lr)), repr(float(loss))])
    plot_loss_curve(
        {f"{name}/fold{fold}": trace for (name, fold), trace in result.traces.items()},
        cfg.output_dir / f"finetune{args.classes}_loss.png",
        title=f"{args.classes}-class finetuning loss",
    )
    _write_manifest(cfg.output_dir, f"finetune{args.classes}", cfg.source_text, cfg.seeds())
    print(f"trained {len(result.models)} fold models "
          f"({len(specs)} specs x {folds.k} folds); out-of-fold matrix at "
          f"{_oof_path(cfg, args.classes)}")
    return 0


def _cmd_filter_train(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(_require(cfg.path("train"), "set [paths] train"), has_labels=True)
    vocab = _load_vocab(cfg)
    base = _base_params(cfg, vocab, fallback_seed=cfg.get("filter", "seed"))
    template = PromptTemplate(cfg.get("filter", "template"))
    verbalizer = Verbalizer.from_words(
        vocab, cfg.get("filter", "negative_words"), cfg.get("filter", "positive_words"),
    )
    model, trace = refute_filter_train(
        ds, base, vocab, cfg.train_config("filter"), template, verbalizer,
    )
    ckpt_path, meta_path = _filter_paths(cfg)
    save_checkpoint(model.params, ckpt_path)
    meta = {
        "template": template.pattern,
        "negative_words": list(verbalizer.negative_words),
        "positive_words": list(verbalizer.positive_words),
        "threshold": cfg.get("filter", "threshold"),
    }
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    write_loss_trace(trace, cfg.output_dir / "filter_trace.csv")
    plot_loss_curve(trace, cfg.output_dir / "filter_loss.png", title="refute-filter loss")
    _write_manifest(cfg.output_dir, "prompt-filter-train", cfg.source_text, cfg.seeds())
    print(f"filter trained {len(trace)} steps; final loss {trace[-1][2]:.4f}; "
          f"checkpoint at {ckpt_path}")
    return 0


def _cmd_filter_apply(args) -> int:
    cfg = load_config(args.config)
    model, threshold = _load_filter(cfg)
    ds = _load_any(args.input)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n_refute = 0
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "p_negative", "p_positive", "decision"])
        for inst in ds:
            is_refute, pred = refute_filter_predict(model, inst, threshold)
            n_refute += int(is_refute)
            writer.writerow([
                inst.id, repr(pred.p_negative), repr(pred.p_positive),
                "Refute" if is_refute else "Other",
            ])
    _write_manifest(out.parent, "prompt-filter-apply", cfg.source_text, cfg.seeds())
    print(f"filter flagged {n_refute}/{len(ds)} instances as refute; wrote {out}")
    return 0


def _load_fold_models(cfg: RunConfig, vocab: Vocabulary, n_classes: int,
                      spec_names: list[str]) -> dict[str, list[ClassifierModel]]:
    classes = _classes_for(n_classes)
    k = cfg.get("cv", "k")
    models: dict[str, list[ClassifierModel]] = {}
    for name in spec_names:
        per_fold = []
        for fold in range(k):
            path = _require(
                _models_dir(cfg, n_classes) / f"{name}_fold{fold}.ckpt",
                f"run `factstack finetune --classes {n_classes}` first",
            )
            params = load_checkpoint(path)
            if params.config.n_classes != len(classes):
                raise DatasetError(f"{path}: head width does not match {n_classes}-class stage")
            per_fold.append(ClassifierModel(params=params, classes=classes, vocab=vocab))
        models[name] = per_fold
    return models


def _cmd_predict(args) -> int:
    cfg = load_config(args.config)
    vocab = _load_vocab(cfg)
    ds = _load_any(args.input)
    spec_names = [name for name, _, _ in cfg.model_specs()]
    rows: list[tuple[str, Label]] = []

    if args.method == 1:
        models = _load_fold_models(cfg, vocab, 5, spec_names)
        stacker = load_stacker(_require(
            cfg.output_dir / "stacker.bin", "run `factstack ensemble stacker` first",
        ))
        if stacker.model_names != spec_names:
            raise DatasetError(
                f"stacker was trained on specs {stacker.model_names}, config lists {spec_names}"
            )
        for inst in ds:
            base_preds = [
                mean_ensemble([predict_batch(m, [inst])[0] for m in models[name]])
                for name in spec_names
            ]
            pred = stacker_predict(stacker, base_preds)
            rows.append((inst.id, pred.argmax_label()))
    else:
        filter_model, threshold = _load_filter(cfg)
        models4 = _load_fold_models(cfg, vocab, 4, spec_names)
        flat = [m for name in spec_names for m in models4[name]]
        for inst in ds:
            label, _ = two_stage_predict(filter_model, flat, inst, threshold)
            rows.append((inst.id, label))

    _write_predictions(rows, Path(args.out))
    _write_manifest(Path(args.out).parent, f"predict-method{args.method}",
                    cfg.source_text, cfg.seeds())
    print(f"wrote {len(rows)} predictions (method {args.method}) to {args.out}")
    return 0


def _cmd_ensemble_stacker(args) -> int:
    cfg = load_config(args.config)
    oof = read_oof_csv(_require(_oof_path(cfg, 5), "run `factstack finetune --classes 5` first"))
    ds = load_dataset(_require(cfg.path("train"), "set [paths] train"), has_labels=True)
    by_id = {inst.id: inst.label for inst in ds}
    try:
        labels = [by_id[i] for i in oof.instance_ids]
    except KeyError as exc:
        raise DatasetError(f"out-of-fold id {exc} missing from the train file") from exc
    stacker = train_stacker(oof, labels, cfg.stacker_config())
    save_stacker(stacker, cfg.output_dir / "stacker.bin")
    _write_manifest(cfg.output_dir, "ensemble-stacker", cfg.source_text, cfg.seeds())
    print(f"stacker trained on {oof.values.shape[0]} out-of-fold rows "
          f"(width {oof.width}); saved to {cfg.output_dir / 'stacker.bin'}")
    return 0


def _cmd_ensemble_snapshot(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(_require(cfg.path("train"), "set [paths] train"), has_labels=True)
    vocab = _load_vocab(cfg)
    classes = _classes_for(args.classes)
    if args.classes == 4:
        ds = Dataset([i for i in ds if i.label is not Label.REFUTE], provenance=ds.provenance)
    base = _base_params(cfg, vocab, fallback_seed=cfg.get("snapshot", "seed"))
    snaps, trace = snapshot_train(
        base, ds, classes, vocab, cfg.train_config("snapshot"), cfg.get("snapshot", "cycles"),
    )
    snap_dir = cfg.output_dir / "snapshots"
    for step, params in zip(snaps.cycle_steps, snaps.snapshots):
        idx = snaps.cycle_steps.index(step) + 1
        save_checkpoint(params, snap_dir / f"snapshot.cycle{idx}.ckpt")
    write_loss_trace(trace, cfg.output_dir / "snapshot_trace.csv")
    plot_loss_curve(trace, cfg.output_dir / "snapshot_loss.png", title="cyclic snapshot training loss")
    if args.input and args.out:
        rows = [(inst.id, snapshot_predict(snaps, inst).argmax_label())
                for inst in _load_any(args.input)]
        _write_predictions(rows, Path(args.out))
        print(f"wrote {len(rows)} snapshot-ensemble predictions to {args.out}")
    _write_manifest(cfg.output_dir, "ensemble-snapshot", cfg.source_text, cfg.seeds())
    print(f"captured {len(snaps.snapshots)} snapshots at steps {snaps.cycle_steps}")
    return 0


def _cmd_evaluate(args) -> int:
    golds_ds = load_dataset(args.golds, has_labels=True)
    preds = _read_predictions(args.preds)
    missing = [inst.id for inst in golds_ds if inst.id not in preds]
    if missing:
        raise DatasetError(f"{args.preds}: no prediction for ids {missing[:5]}"
                           + ("..." if len(missing) > 5 else ""))
    classes = _classes_for(args.classes)
    golds = [inst.label for inst in golds_ds]
    pred_labels = [preds[inst.id] for inst in golds_ds]
    cm = confusion(golds, pred_labels, classes)

    out_dir = Path(args.out_dir) if args.out_dir else Path(args.preds).parent
    write_metrics_csv(cm, out_dir / "metrics.csv")
    table = format_metrics_table(cm)
    (out_dir / "metrics.txt").write_text(table, encoding="utf-8")
    plot_confusion_heatmap(cm, out_dir / "confusion.png")
    _write_manifest(out_dir, "evaluate", f"golds={args.golds} preds={args.preds}", {})
    print(table, end="")
    print(f"final weighted F1: {weighted_f1(cm):.4f}")
    return 0


def run(argv: Sequence[str]) -> int:
    """Dispatch a CLI invocation; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "pretrain":
            return _cmd_pretrain(args)
        if args.command == "finetune":
            return _cmd_finetune(args)
        if args.command == "prompt-filter":
            if args.action == "train":
                return _cmd_filter_train(args)
            if args.action == "apply":
                return _cmd_filter_apply(args)
            raise UsageError("prompt-filter requires an action: train or apply")
        if args.command == "ensemble":
            if args.action == "stacker":
                return _cmd_ensemble_stacker(args)
            if args.action == "snapshot":
                return _cmd_ensemble_snapshot(args)
            raise UsageError("ensemble requires an action: stacker or snapshot")
        if args.command == "predict":
            return _cmd_predict(args)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        raise UsageError(f"unknown subcommand {args.command!r}")
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
