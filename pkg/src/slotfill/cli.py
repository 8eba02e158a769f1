"""Command-line entry point: train, eval, predict, benchmark, gen-synth.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import config as config_mod
from .contrastive import METRICS
from .data import (TAG_O, AnnotatedUtterance, LabelVocabulary,
                   build_vocabulary, generate_synthetic, load_manifest,
                   parse_synthetic_spec, remap_labels, save_dataset, tokenize)
from .encoder import LABEL_MODES, POLICIES
from .errors import DataError, NumericError, UsageError
from .evaluation import (benchmark_latency, evaluate_zero_shot,
                         export_entity_embeddings)
from .model import SlotFillModel
from .report import (write_benchmark_report, write_eval_report,
                     write_training_report)
from .training import fit, load_into_model

# dedicated flag -> config key; --set still wins over these
_FLAG_KEYS = {
    "seed": "trainer.seed",
    "batch_size": "trainer.batch_size",
    "tau": "contrastive.tau",
    "metric": "contrastive.metric",
    "interaction_policy": "encoder.interaction_policy",
    "label_mode": "encoder.label_mode",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat `section.key = value` file")
    p.add_argument("--preset", choices=sorted(config_mod.PRESETS),
                   help="named override bundle applied below the file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   dest="overrides", help="single-key override; repeatable")
    p.add_argument("--dump-config", action="store_true",
                   help="print the resolved config and exit")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--metric", choices=sorted(METRICS))
    p.add_argument("--interaction-policy", choices=sorted(POLICIES))
    p.add_argument("--label-mode", choices=sorted(LABEL_MODES))
    p.add_argument("--no-contrastive", action="store_true",
                   help="train without the slot-contrastive term")


def _resolve(args) -> dict:
    flags = {}
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr)
        if value is not None:
            flags[key] = value
    if args.no_contrastive:
        flags["trainer.with_contrastive"] = False
    return config_mod.resolve(file=args.config, preset=args.preset,
                              flags=flags, overrides=args.overrides)


def build_parser() -> _Parser:
    parser = _Parser(prog="slotfill",
                     description="Zero-shot slot filling: train, evaluate, "
                                 "predict, and benchmark.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", parents=[], help="fit on a manifest's source split")
    _add_config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", default="runs/train")
    p.add_argument("--checkpoint", help="defaults to <out-dir>/model.ckpt")

    p = sub.add_parser("eval", help="zero-shot evaluation on the target split")
    _add_config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", default="runs/eval")
    p.add_argument("--export-embeddings", action="store_true",
                   help="also dump unit slot-token vectors as TSV")

    p = sub.add_parser("predict", help="spans for plain utterances")
    _add_config_args(p)
    p.add_argument("--manifest", required=True,
                   help="training manifest; rebuilds the vocabulary")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--labels", required=True,
                   help="comma-separated target slot labels")
    p.add_argument("--input", required=True,
                   help="utterances, one per line; - for stdin")
    p.add_argument("--output", help="destination file; stdout when omitted")

    p = sub.add_parser("benchmark", help="decode latency, batched vs one-by-one")
    _add_config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out-dir", default="runs/benchmark")
    p.add_argument("--runs", type=int, default=3)

    p = sub.add_parser("gen-synth", help="sample a synthetic corpus from a spec")
    _add_config_args(p)
    p.add_argument("--spec", required=True)
    p.add_argument("--out-dir", default="runs/synth")
    return parser


def _load_model(cfg_map, train_cfg, manifest_path, checkpoint):
    split = load_manifest(manifest_path)
    vocab = build_vocabulary(split)
    model = SlotFillModel(train_cfg.model, vocab, seed=train_cfg.seed)
    if checkpoint is not None:
        fingerprint = config_mod.fingerprint_for(cfg_map, vocab,
                                                 split.source_label_names)
        load_into_model(model, checkpoint, expected_fingerprint=fingerprint)
    return split, model


def _cmd_train(args) -> int:
    cfg_map = _resolve(args)
    if args.dump_config:
        print(config_mod.canonical_text(cfg_map), end="")
        return 0
    train_cfg = config_mod.build_train_config(cfg_map)
    split = load_manifest(args.manifest)
    vocab = build_vocabulary(split)
    fingerprint = config_mod.fingerprint_for(cfg_map, vocab,
                                             split.source_label_names)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = Path(args.checkpoint) if args.checkpoint else out_dir / "model.ckpt"
    result = fit(split, train_cfg, log=print, checkpoint_path=checkpoint,
                 fingerprint=fingerprint)
    (out_dir / "config.cfg").write_text(config_mod.canonical_text(cfg_map),
                                        encoding="utf-8")
    paths = write_training_report(result, out_dir)
    print(f"best epoch {result.best_epoch} dev-F1 {result.best_f1:.6f}")
    for p in [checkpoint, out_dir / "config.cfg"] + paths:
        print(f"wrote {p}")
    return 0


def _cmd_eval(args) -> int:
    cfg_map = _resolve(args)
    if args.dump_config:
        print(config_mod.canonical_text(cfg_map), end="")
        return 0
    train_cfg = config_mod.build_train_config(cfg_map)
    split, model = _load_model(cfg_map, train_cfg, args.manifest,
                               args.checkpoint)
    report = evaluate_zero_shot(model, split, batch_size=train_cfg.batch_size)
    out_dir = Path(args.out_dir)
    paths = write_eval_report(report, out_dir)
    if args.export_embeddings:
        tgt_labels = split.label_vocab.restrict(split.target_label_names)
        target = remap_labels(split.target, split.label_vocab, tgt_labels)
        emb_path = out_dir / "embeddings.tsv"
        n = export_entity_embeddings(model, target, tgt_labels, model.vocab,
                                     emb_path, batch_size=train_cfg.batch_size,
                                     max_len=train_cfg.model.max_len)
        print(f"wrote {emb_path} ({n} rows)")
    print(report.to_kv(), end="")
    for p in paths:
        print(f"wrote {p}")
    return 0


def _cmd_predict(args) -> int:
    cfg_map = _resolve(args)
    if args.dump_config:
        print(config_mod.canonical_text(cfg_map), end="")
        return 0
    train_cfg = config_mod.build_train_config(cfg_map)
    _, model = _load_model(cfg_map, train_cfg, args.manifest, args.checkpoint)
    names = [n.strip() for n in args.labels.split(",") if n.strip()]
    if not names:
        raise UsageError("--labels needs at least one name")
    label_vocab = LabelVocabulary.from_names([], names)
    if args.input == "-":
        lines = sys.stdin.read().splitlines()
    else:
        try:
            lines = Path(args.input).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read input: {exc}") from None
    utterances = []
    for line in lines:
        tokens = tokenize(line)
        if not tokens:
            continue
        utterances.append(AnnotatedUtterance(tokens, [TAG_O] * len(tokens),
                                             [None] * len(tokens)))
    if not utterances:
        raise DataError("no utterances in input")
    spans_per_utt = model.predict_spans(utterances, label_vocab,
                                        batch_size=train_cfg.batch_size)
    blocks = []
    for spans in spans_per_utt:
        blocks.append("\n".join(f"{s.start}:{s.end}:{s.label}" for s in spans))
    text = "\n\n".join(blocks) + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
        print(f"wrote {args.output}")
    else:
        print(text, end="")
    return 0


def _cmd_benchmark(args) -> int:
    cfg_map = _resolve(args)
    if args.dump_config:
        print(config_mod.canonical_text(cfg_map), end="")
        return 0
    train_cfg = config_mod.build_train_config(cfg_map)
    split, model = _load_model(cfg_map, train_cfg, args.manifest,
                               args.checkpoint)
    if split.target:
        dataset = split.target
        label_names = split.target_label_names
    else:
        dataset = split.source
        label_names = split.source_label_names
    labels = split.label_vocab.restrict(label_names)
    timings = {}
    for mode in ("batched", "instance-wise"):
        timings[mode] = benchmark_latency(
            model, dataset, labels, model.vocab, train_cfg.batch_size, mode,
            runs=args.runs, max_len=train_cfg.model.max_len)
        print(f"{mode}: {timings[mode]:.6f} s over {len(dataset)} utterances")
    if timings["batched"] > 0:
        print(f"speedup: {timings['instance-wise'] / timings['batched']:.3f}x")
    for p in write_benchmark_report(timings, Path(args.out_dir)):
        print(f"wrote {p}")
    return 0


def _cmd_gen_synth(args) -> int:
    cfg_map = _resolve(args)
    if args.dump_config:
        print(config_mod.canonical_text(cfg_map), end="")
        return 0
    seed = cfg_map["trainer.seed"]
    try:
        text = Path(args.spec).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read spec: {exc}") from None
    split = generate_synthetic(parse_synthetic_spec(text), seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source_path = out_dir / "source.bio"
    save_dataset(split.source, split.label_vocab, source_path, domain="source")
    manifest = ["source: source.bio"]
    written = [source_path]
    if split.target:
        target_path = out_dir / "target.bio"
        save_dataset(split.target, split.label_vocab, target_path,
                     domain="target")
        manifest.append("target: target.bio")
        written.append(target_path)
    target_names = split.target_label_names
    if target_names:
        manifest.append("labels:")
        manifest.extend(target_names)
    manifest_path = out_dir / "data.manifest"
    manifest_path.write_text("\n".join(manifest) + "\n", encoding="utf-8")
    written.append(manifest_path)
    print(f"{len(split.source)} source / {len(split.target)} target utterances")
    for p in written:
        print(f"wrote {p}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "benchmark": _cmd_benchmark,
    "gen-synth": _cmd_gen_synth,
}


def run_cli(argv) -> int:
    args = build_parser().parse_args(argv)
    return _COMMANDS[args.verb](args)


def main(argv=None) -> int:
    try:
        return run_cli(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
