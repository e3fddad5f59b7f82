"""Command-line interface.

Subcommands: make-synthetic, train-textclf, infer-labels, eval-labels,
train-detector, detect, evaluate.  Detector training flags mirror TrainConfig
and can also come from a flat key=value config file or WEAKDET_* environment
variables (flag > env > file > default).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from . import data, evaluation, synth, textclf, train
from .captions import CategoryVocabulary, LabelSet, load_word_vectors, tokenize
from .config import TrainConfig, load_train_config

log = logging.getLogger("weakdet")


def _add_train_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "scales":
            parser.add_argument(flag, help="comma-separated scales, e.g. 48,64,80")
        elif f.name == "last_head_only":
            parser.add_argument(flag, choices=["true", "false"], help="use only the last refinement head")
        else:
            parser.add_argument(flag, help=f"{f.name} (default {f.default})")


def _train_config_from_args(args) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)}
    return load_train_config(config_path=args.config, overrides=overrides)


def _load_vocab(args) -> CategoryVocabulary:
    return CategoryVocabulary.from_files(args.classes, getattr(args, "synonyms", None))


def _strategy_artifacts(args, vocab):
    table = None
    clf = None
    if getattr(args, "embeddings", None):
        table = load_word_vectors(args.embeddings)
    if getattr(args, "classifier", None):
        clf, meta = textclf.load_text_checkpoint(args.classifier)
        if meta["vocab_hash"] != vocab.content_hash():
            log.warning("classifier checkpoint was trained against a different class list")
    return table, clf


def _caption_examples(manifest, vocab, concat: bool):
    examples = []
    skipped = 0
    for record in manifest:
        if record.gold_labels is None:
            skipped += 1
            continue
        gold = LabelSet(frozenset(vocab.index_of(n) for n in record.gold_labels), "gold")
        captions = [" ".join(record.captions)] if concat else list(record.captions)
        for caption in captions:
            if caption.strip():
                examples.append(textclf.LabeledCaptionExample(tokenize(caption), gold))
    if skipped:
        log.info("skipped %d records without gold labels", skipped)
    return examples


def cmd_make_synthetic(args) -> int:
    cfg = synth.SynthConfig(
        num_images=args.images,
        num_classes=args.num_classes,
        canvas=args.canvas,
        grid=args.grid,
        seed=args.seed,
        train_fraction=args.train_fraction,
    )
    summary = synth.make_synthetic(args.out, cfg)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_train_textclf(args) -> int:
    vocab = _load_vocab(args)
    table = load_word_vectors(args.embeddings)
    manifest = data.load_manifest(args.manifest)
    examples = _caption_examples(manifest, vocab, args.concat_captions)
    cfg = textclf.TextTrainConfig(
        lr=args.lr, steps=args.steps, batch_size=args.batch_size, seed=args.seed,
        threshold=args.threshold, hidden=args.hidden, train_embeddings=args.train_embeddings,
        concat_captions=args.concat_captions,
    )
    params = textclf.train_text_classifier(examples, table, cfg)
    textclf.save_text_checkpoint(args.out, params, vocab.content_hash(), table.dim)
    loss, _, _ = textclf.classifier_loss_and_grads(examples, table, params)
    log.info("trained on %d caption examples; final corpus loss %.4f", len(examples), loss)
    print(f"saved text classifier to {args.out}")
    return 0


def cmd_infer_labels(args) -> int:
    vocab = _load_vocab(args)
    table, clf = _strategy_artifacts(args, vocab)
    manifest = data.load_manifest(args.manifest)
    labels, stats = data.build_image_labels(manifest, args.strategy, vocab, table, clf)
    data.write_labels(args.out, labels, vocab.classes)
    print(f"wrote {len(labels)} label sets to {args.out} "
          f"({stats.empty_images} empty, caption provenance {stats.captions_by_provenance})")
    return 0


def _label_pr_report(pred, gold, vocab) -> dict:
    result = textclf.eval_label_pr(pred, gold)
    per_class = [
        {"class": name, "precision": p, "recall": r}
        for name, (p, r) in zip(vocab.classes, result.per_class)
    ]
    return {"protocol": "labelpr", "per_class": per_class,
            "precision": result.precision, "recall": result.recall}


def cmd_eval_labels(args) -> int:
    vocab = _load_vocab(args)
    manifest = data.load_manifest(args.manifest)
    if args.labels:
        labels = data.read_labels(args.labels, vocab)
    else:
        table, clf = _strategy_artifacts(args, vocab)
        labels, _ = data.build_image_labels(manifest, args.strategy, vocab, table, clf)
    gold, _ = data.build_image_labels(manifest, "gold", vocab)
    ids = [r.image_id for r in manifest]
    report = _label_pr_report([labels[i] for i in ids], [gold[i] for i in ids], vocab)
    json_path, text_path = evaluation.write_report(report, args.out_dir, "labelpr")
    print(open(text_path).read().rstrip())
    print(f"reports: {json_path}, {text_path}")
    return 0


def cmd_train_detector(args) -> int:
    vocab = _load_vocab(args)
    manifest = data.load_manifest(args.manifest)
    config = _train_config_from_args(args)
    if args.labels:
        labels = data.read_labels(args.labels, vocab)
    else:
        table, clf = _strategy_artifacts(args, vocab)
        labels, _ = data.build_image_labels(manifest, args.strategy, vocab, table, clf)
    val_manifest = data.load_manifest(args.val_manifest) if args.val_manifest else None
    result = train.train_detector(
        manifest, labels, vocab.classes, config,
        workdir=args.workdir, resume=args.resume, val_manifest=val_manifest,
    )
    final = f"{args.workdir}/ckpt_{result.state.step:06d}.npz"
    train.save_detector_checkpoint(final, result.state)
    print(f"trained {result.state.step} steps; final loss {result.losses[-1]:.4f}; "
          f"skipped {result.skipped_empty} empty-label images; checkpoint {final}")
    if result.best_checkpoint:
        print(f"best validation mAP {result.best_val_map:.4f} at {result.best_checkpoint}")
    return 0


def cmd_detect(args) -> int:
    state = train.load_detector_checkpoint(args.checkpoint)
    manifest = data.load_manifest(args.manifest)
    scales = None
    if args.scales:
        scales = tuple(int(s) for s in args.scales.replace(",", " ").split())
    dets = train.run_detection_to_dump(manifest, state, args.out, scales)
    print(f"wrote {len(dets)} detections to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    vocab = _load_vocab(args)
    manifest = data.load_manifest(args.manifest)
    if args.protocol == "labelpr":
        if not args.labels:
            raise SystemExit("--labels is required for the labelpr protocol")
        labels = data.read_labels(args.labels, vocab)
        gold, _ = data.build_image_labels(manifest, "gold", vocab)
        ids = [r.image_id for r in manifest]
        report = _label_pr_report([labels[i] for i in ids], [gold[i] for i in ids], vocab)
        stem = "labelpr"
    else:
        dets = evaluation.read_detection_dump(args.dump, vocab.classes)
        gts = train.ground_truth_boxes(manifest, vocab.classes)
        if args.protocol == "voc":
            per_class, mean = evaluation.detection_map(
                dets, gts, len(vocab), iou_threshold=args.iou, eleven_point=args.eleven_point
            )
            report = {
                "protocol": "voc",
                "per_class": [{"class": n, "ap": ap} for n, ap in zip(vocab.classes, per_class)],
                "map": mean,
                "iou_threshold": args.iou,
                "interpolation": "11point" if args.eleven_point else "all-point",
            }
            stem = "voc"
        elif args.protocol == "coco":
            report = {"protocol": "coco", **evaluation.coco_ap_sweep(dets, gts, len(vocab))}
            stem = "coco"
        elif args.protocol == "corloc":
            per_class, mean = evaluation.corloc_table(dets, gts, len(vocab))
            report = {
                "protocol": "corloc",
                "per_class": [{"class": n, "corloc": v} for n, v in zip(vocab.classes, per_class)],
                "corloc": mean,
            }
            stem = "corloc"
        else:
            raise SystemExit(f"unknown protocol {args.protocol}")
        if args.plots:
            evaluation.plot_pr_curves(dets, gts, vocab.classes, f"{args.out_dir}/pr_{stem}.png")
    json_path, text_path = evaluation.write_report(report, args.out_dir, stem)
    print(open(text_path).read().rstrip())
    print(f"reports: {json_path}, {text_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakdet", description=__doc__)
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="generate the synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.set_defaults(fn=cmd_make_synthetic)

    p = sub.add_parser("train-textclf", help="train the caption classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--hidden", type=int, default=400)
    p.add_argument("--train-embeddings", action="store_true")
    p.add_argument("--concat-captions", action="store_true",
                   help="one example per image (captions joined) instead of per caption")
    p.set_defaults(fn=cmd_train_textclf)

    p = sub.add_parser("infer-labels", help="captions -> image-level label sets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--strategy", choices=data.STRATEGIES, required=True)
    p.add_argument("--synonyms")
    p.add_argument("--embeddings")
    p.add_argument("--classifier")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer_labels)

    p = sub.add_parser("eval-labels", help="precision/recall of inferred labels vs gold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--labels", help="labels JSONL from infer-labels")
    p.add_argument("--strategy", choices=data.STRATEGIES)
    p.add_argument("--synonyms")
    p.add_argument("--embeddings")
    p.add_argument("--classifier")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(fn=cmd_eval_labels)

    p = sub.add_parser("train-detector", help="train the detection model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--labels", help="labels JSONL; alternative to --strategy")
    p.add_argument("--strategy", choices=data.STRATEGIES, default="gold")
    p.add_argument("--synonyms")
    p.add_argument("--embeddings")
    p.add_argument("--classifier")
    p.add_argument("--workdir", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--val-manifest", help="manifest for best-mAP checkpoint retention")
    _add_train_config_flags(p)
    p.set_defaults(fn=cmd_train_detector)

    p = sub.add_parser("detect", help="run detection and write a dump file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scales", help="override checkpoint scales, e.g. 64 or 48,64,80")
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("evaluate", help="score a detection dump or labels file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--protocol", choices=["voc", "coco", "corloc", "labelpr"], required=True)
    p.add_argument("--dump", help="detection dump (voc/coco/corloc)")
    p.add_argument("--labels", help="labels JSONL (labelpr)")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--eleven-point", action="store_true", help="11-point AP interpolation")
    p.add_argument("--plots", action="store_true", help="also write PR-curve plots")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(fn=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
