"""Command line surface: dataset generation, training, evaluation, inference.

Every subcommand exits 0 on success and 1 with a one-line ``error:``
diagnostic on any handled failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import List, Optional

import numpy as np

from .autodiff import ShapeError
from .dataset import (
    AnnotationError,
    BoundingBox,
    GenConfig,
    GenerationError,
    generate_dataset,
    load_dataset,
    manifest_digest,
    read_ppm,
    save_dataset,
    tokenize,
)
from .engine import (
    EngineError,
    TrainConfig,
    caption_sample,
    crop_to_input,
    dump_checkpoint_text,
    evaluate_split,
    export_attention,
    image_to_input,
    load_checkpoint,
    prepare_scene,
    restore_model,
    train,
)
from .metrics import EvalPair, evaluate_corpus, render_table
from .model import SampleInputs, relation_features


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate_dataset(args) -> int:
    config = GenConfig(
        image_size=args.image_size,
        views=args.views,
        refs_per_target=args.refs_per_target,
        val_fraction=args.val_fraction,
    )
    bundle = generate_dataset(args.seed, args.scenes, config)
    save_dataset(bundle, args.out)
    objects = [len(s.objects) for s in bundle.scenes]
    words = [len(tokenize(sent)) for ann in bundle.annotations for sent in ann.sentences]
    print(f"scenes: {len(bundle.scenes)} "
          f"(train {len(bundle.splits['train'])}, val {len(bundle.splits['val'])})")
    print(f"views per scene: {config.views}")
    print(f"mean targets/image: {np.mean(objects):.3f}")
    print(f"mean words/instruction: {np.mean(words):.3f}")
    print(f"vocabulary: {len(bundle.vocab)} words")
    print(f"manifest digest: {manifest_digest(args.out)}")
    return 0


def cmd_train(args) -> int:
    data = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            return _fail(f"config file {args.config} must hold a JSON object")
    overrides = dict(data.get("model_overrides", {}))
    for item in args.model_override or []:
        if "=" not in item:
            return _fail(f"--model-override needs key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    if overrides:
        data["model_overrides"] = overrides
    for name in ("dataset", "out_dir", "preset", "mode", "batch_size", "lr",
                 "lr_decay", "beta1", "beta2", "max_steps", "seed",
                 "checkpoint_interval", "log_interval", "stop_loss"):
        value = getattr(args, name)
        if value is not None:
            data[name] = value
    if "dataset" not in data:
        return _fail("no dataset given (use --dataset or a config file)")

    config = TrainConfig.from_dict(data)
    result = train(config, log=print)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"report: {os.path.join(config.out_dir, 'run_report.json')}")
    return 0


def _load_model(path):
    ckpt = load_checkpoint(path)
    return restore_model(ckpt), ckpt


def cmd_evaluate(args) -> int:
    model, ckpt = _load_model(args.checkpoint)
    bundle = load_dataset(args.dataset)
    report, pairs = evaluate_split(model, ckpt.vocab, bundle, args.split, beam=args.beam)
    decoder = f"beam-{args.beam}" if args.beam else "greedy"
    label = f"{model.config.mode} ({decoder}, {args.split})"
    print(render_table([(label, report)]))
    print(f"scenes scored: {len(pairs)}")
    if args.json_out:
        payload = {
            "split": args.split,
            "decoder": decoder,
            "mode": model.config.mode,
            "scenes": len(pairs),
            "scores": report.as_dict(),
        }
        with open(args.json_out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return 0


def _parse_box(text: str) -> BoundingBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise ValueError(f"box must be x,y,w,h, got {text!r}")
    x, y, w, h = (int(p) for p in parts)
    return BoundingBox(x, y, w, h, 1)


def _inputs_from_files(model, paths: List[str], target_box: str,
                       source_box: str) -> SampleInputs:
    if len(paths) != model.config.views:
        raise EngineError(
            f"model expects {model.config.views} view images, got {len(paths)}")
    images = []
    for path in paths:
        try:
            images.append(read_ppm(path))
        except (OSError, ValueError) as err:
            raise EngineError(f"{path}: {err}")
    tbox = _parse_box(target_box)
    sbox = _parse_box(source_box)
    height, width = images[0].shape[:2]
    for what, box in (("target", tbox), ("source", sbox)):
        if box.x + box.w > width or box.y + box.h > height:
            raise EngineError(f"{what} box {box.as_list()} exceeds the first view image")
    return SampleInputs(
        views=[image_to_input(img, model.config.image_size) for img in images],
        target_crop=crop_to_input(images[0], tbox, model.config.image_size),
        source_crop=crop_to_input(images[0], sbox, model.config.image_size),
        relation=relation_features(
            (tbox.x, tbox.y, tbox.w, tbox.h), (sbox.x, sbox.y, sbox.w, sbox.h),
            (width, height), fifth=model.config.fifth_relation),
    )


def _scene_inputs(model, ckpt, dataset_path: str, scene_id: int):
    bundle = load_dataset(dataset_path)
    if ckpt.vocab != bundle.vocab:
        raise EngineError("checkpoint vocabulary differs from the dataset vocabulary")
    scenes = {s.scene_id: s for s in bundle.scenes}
    if scene_id not in scenes:
        raise EngineError(f"scene {scene_id} is not in the dataset")
    annotations = {a.scene_id: a for a in bundle.annotations}
    prepared = prepare_scene(scenes[scene_id], annotations[scene_id],
                             model.config, bundle.config.image_size)
    return prepared.inputs


def cmd_caption(args) -> int:
    model, ckpt = _load_model(args.checkpoint)
    if args.images:
        if args.target_box is None or args.source_box is None:
            return _fail("--images requires --target-box and --source-box")
        inputs = _inputs_from_files(model, args.images, args.target_box, args.source_box)
    elif args.dataset is not None and args.scene_id is not None:
        inputs = _scene_inputs(model, ckpt, args.dataset, args.scene_id)
    else:
        return _fail("give either --dataset with --scene-id, or --images with boxes")
    result = caption_sample(model, ckpt.vocab, inputs, beam=args.beam)
    if args.json:
        print(json.dumps({
            "sentence": " ".join(result.words),
            "words": result.words,
            "token_ids": result.token_ids,
            "logps": result.logps,
        }, sort_keys=True))
    else:
        print(" ".join(result.words))
    return 0


def cmd_export_attention(args) -> int:
    model, ckpt = _load_model(args.checkpoint)
    inputs = _scene_inputs(model, ckpt, args.dataset, args.scene_id)
    summary = export_attention(model, ckpt.vocab, inputs, args.out)
    print(f"sentence: {' '.join(summary['words'])}")
    print(f"wrote {len(summary['files'])} files to {args.out}")
    return 0


def cmd_dump_checkpoint(args) -> int:
    print(dump_checkpoint_text(args.checkpoint))
    return 0


def _record_tokens(value) -> tuple:
    if isinstance(value, str):
        return tuple(tokenize(value))
    if isinstance(value, list):
        return tuple(str(t) for t in value)
    raise ValueError(f"candidate/reference must be a string or token list, got {type(value).__name__}")


def cmd_score(args) -> int:
    with open(args.pairs, encoding="utf-8") as fh:
        records = json.load(fh)
    if not isinstance(records, list) or not records:
        return _fail(f"{args.pairs} must hold a non-empty JSON array of records")
    pairs = []
    for i, record in enumerate(records):
        if not isinstance(record, dict) or "candidate" not in record or "references" not in record:
            return _fail(f"record {i} needs 'candidate' and 'references' fields")
        pairs.append(EvalPair(
            _record_tokens(record["candidate"]),
            tuple(_record_tokens(r) for r in record["references"]),
        ))
    report = evaluate_corpus(pairs, smooth=args.smooth)
    print(render_table([(args.label, report)]))
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as fh:
            json.dump({"pairs": len(pairs), "scores": report.as_dict()},
                      fh, indent=1, sort_keys=True)
            fh.write("\n")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multiabn",
        description="Multi-view attention branch captioner: generate data, "
                    "train, evaluate, caption, export attention maps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-dataset", help="render a synthetic scene dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--refs-per-target", type=int, default=2)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_generate_dataset)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--dataset")
    p.add_argument("--out-dir")
    p.add_argument("--preset", choices=("toy", "large"))
    p.add_argument("--mode", choices=("full", "visual_only", "linguistic_only"))
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float,
                   help="per-step learning rate multiplier (default 1.0)")
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--log-interval", type=int)
    p.add_argument("--stop-loss", type=float)
    p.add_argument("--model-override", action="append", metavar="KEY=VALUE",
                   help="override a model config field (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--beam", type=int, default=0, help="beam width (0 = greedy)")
    p.add_argument("--json-out", help="also write scores as JSON")
    p.add_argument("--seed", type=int, default=0,
                   help="accepted for uniformity; evaluation is deterministic")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("caption", help="decode one sample to a sentence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--scene-id", type=int)
    p.add_argument("--images", nargs="+", help="PPM view images (file mode)")
    p.add_argument("--target-box", help="x,y,w,h in the first view")
    p.add_argument("--source-box", help="x,y,w,h in the first view")
    p.add_argument("--beam", type=int, default=0)
    p.add_argument("--json", action="store_true",
                   help="emit token ids and per-token log-probs as JSON")
    p.add_argument("--seed", type=int, default=0,
                   help="accepted for uniformity; decoding is deterministic")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("export-attention", help="write per-word attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene-id", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0,
                   help="accepted for uniformity; decoding is deterministic")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("dump-checkpoint", help="print a checkpoint as text")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_dump_checkpoint)

    p = sub.add_parser("score", help="score candidate/reference records from JSON")
    p.add_argument("--pairs", required=True,
                   help="JSON array of {candidate, references[]} records")
    p.add_argument("--label", default="corpus")
    p.add_argument("--smooth", action="store_true", help="add-one BLEU smoothing")
    p.add_argument("--json-out")
    p.add_argument("--seed", type=int, default=0,
                   help="accepted for uniformity; scoring is deterministic")
    p.set_defaults(func=cmd_score)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (EngineError, GenerationError, AnnotationError, ShapeError,
            ValueError, IndexError, OSError, json.JSONDecodeError) as err:
        return _fail(str(err))


if __name__ == "__main__":
    sys.exit(main())
