"""Command-line entry points for the full experimental pipeline."""

from __future__ import annotations

import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .anchors import anchors_from_samples, load_anchors, save_anchors
from .attacks import (
    AttackConfig,
    apply_perturbation,
    load_perturbation,
    partial_sequence_eval,
    save_perturbation,
    universal_attack,
)
from .data import SceneConfig, generate_scene, load_dataset, save_scene
from .defense import ATConfig, kpgd_adversarial_training, reuse_patch_training, rfgsm_training
from .detector import (
    ModelConfig,
    build_model,
    freeze_model,
    load_checkpoint,
    save_checkpoint,
    train_baseline,
)
from .evaluation import EvalConfig, evaluate_map
from .harness import (
    ExperimentSpec,
    ablate_horizon,
    ablate_partial_sequence,
    ablate_patch,
    attack_subset,
    default_patch_positions,
    detect_and_render,
    run_table_experiment,
    visualize_perturbation,
)


def parse_eps(text: str) -> float:
    """Accept '10/255' fractions or plain floats."""
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def parse_mask(text: str | None):
    if text is None:
        return None
    return tuple(ch == "1" for ch in text)


def parse_pos(text: str | None):
    if text is None:
        return None
    r, c = text.split(",")
    return (int(r), int(c))


def args_doc(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("fn",)}


def _scene_config(args) -> SceneConfig:
    return SceneConfig(
        height=args.height, width=args.width, sequence_length=args.t,
        num_keyframes=args.keyframes, seed=0,
    )


def cmd_gen_data(args) -> None:
    cfg = _scene_config(args)
    root = Path(args.out)
    for split, count, base in (
        ("train", args.train_scenes, args.seed),
        ("val", args.val_scenes, args.seed + 1_000_000),
    ):
        split_dir = root / split
        for i in range(count):
            scene_cfg = replace(cfg, seed=base + i)
            save_scene(split_dir, f"scene_{scene_cfg.seed:06d}", generate_scene(scene_cfg))
        print(f"wrote {count} scenes to {split_dir}")


def cmd_anchors(args) -> None:
    samples = load_dataset(args.data, args.t)
    anchors = anchors_from_samples(samples, k=args.k, seed=args.seed)
    save_anchors(args.out, anchors)
    print(f"wrote {len(anchors)} anchors to {args.out}")


def _model_config(args, samples, anchors) -> ModelConfig:
    h, w = samples[0].frames.shape[1:3]
    return ModelConfig(
        frames=args.t, num_classes=args.classes, num_anchors=len(anchors),
        image_size=(int(h), int(w)), seed=args.seed,
    )


def cmd_train(args) -> None:
    train = load_dataset(args.data, args.t, reverse=args.reverse, mirror=args.mirror)
    anchors = load_anchors(args.anchors)
    model = build_model(_model_config(args, train, anchors))
    model, history = train_baseline(
        model, train, anchors, args.epochs, seed=args.seed,
        batch_size=args.batch_size, lr=args.lr, log_fn=print,
    )
    meta = {"seed": args.seed, "epochs": args.epochs}
    if args.val:
        val = load_dataset(args.val, args.t)
        meta["clean_map"] = evaluate_map(model, val, anchors).map
        print(f"clean mAP {meta['clean_map']:.4f}")
    save_checkpoint(args.out, model, meta)
    print(f"wrote checkpoint to {args.out}")


def cmd_attack(args) -> None:
    model, _ = load_checkpoint(args.model)
    freeze_model(model)
    data = load_dataset(args.data, model.config.frames)
    anchors = load_anchors(args.anchors)
    objective = {"empty": "targeted_empty", "ascent": "untargeted_ascent"}[args.objective]
    config = AttackConfig(
        kind=args.kind, objective=objective, eps=args.eps,
        patch_size=args.patch_size, patch_pos=parse_pos(args.patch_pos),
        frame_mask=parse_mask(args.frame_mask), share_across_frames=args.share_frames,
        epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
    )
    if args.per_instance is not None:
        from .attacks import per_instance_attack

        pert = per_instance_attack(model, data[args.per_instance], config, anchors)
    else:
        pert, _ = universal_attack(model, data, config, anchors, log_fn=print)
    save_perturbation(args.out, pert)
    print(f"wrote perturbation to {args.out}")


def cmd_defend(args) -> None:
    train = load_dataset(args.data, args.t, reverse=args.reverse, mirror=args.mirror)
    anchors = load_anchors(args.anchors)
    model = build_model(_model_config(args, train, anchors))
    config = ATConfig(
        strategy={"kpgd": "kpgd", "reuse": "reuse_patch", "rfgsm": "rfgsm"}[args.strategy],
        kind=args.kind, eps=args.eps, patch_size=args.patch_size, k=args.k,
        apply_prob=args.prob, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, seed=args.seed,
    )
    if config.strategy == "kpgd":
        model, _ = kpgd_adversarial_training(model, train, anchors, config, log_fn=print)
    elif config.strategy == "reuse_patch":
        pool_dir = Path(args.pool)
        pool = [load_perturbation(p) for p in sorted(pool_dir.glob("*.bin"))]
        model, _ = reuse_patch_training(model, train, anchors, pool, config, log_fn=print)
    else:
        model, _ = rfgsm_training(model, train, anchors, config, log_fn=print)
    save_checkpoint(args.out, model, {"at_config": args_doc(args)})
    print(f"wrote defended checkpoint to {args.out}")


def cmd_eval(args) -> None:
    model, _ = load_checkpoint(args.model)
    data = load_dataset(args.data, model.config.frames)
    anchors = load_anchors(args.anchors)
    eval_cfg = EvalConfig(conf_threshold=args.conf, nms_iou=args.nms, match_iou=args.match_iou)
    if args.pert:
        pert = load_perturbation(args.pert)
        if args.frame_mask:
            result = partial_sequence_eval(
                model, data, pert, parse_mask(args.frame_mask), anchors, eval_cfg
            )
        else:
            attacked = [apply_perturbation(s, pert) for s in data]
            result = evaluate_map(model, attacked, anchors, eval_cfg)
    else:
        result = evaluate_map(model, data, anchors, eval_cfg)
    extra = {"config": args_doc(args), "model_meta": json.loads(Path(str(args.model) + ".json").read_text())}
    result.save(args.out, extra)
    if args.csv:
        with open(args.csv, "a") as fh:
            fh.write(f"{args.model},{args.pert or 'clean'},{result.map:.6f}\n")
    print(f"mAP {result.map:.4f} -> {args.out}")


def _load_spec(args) -> ExperimentSpec:
    if args.spec:
        return ExperimentSpec.from_json(args.spec)
    return ExperimentSpec()


def cmd_table(args) -> None:
    doc = run_table_experiment(_load_spec(args), args.out, log_fn=print)
    print(json.dumps(doc["cells"], indent=1))


def cmd_ablate_horizon(args) -> None:
    lengths = tuple(int(x) for x in args.lengths.split(","))
    seeds = tuple(int(x) for x in args.seeds.split(","))
    doc = ablate_horizon(
        _load_spec(args), args.out, lengths=lengths, seeds=seeds,
        with_attack=args.with_attack, log_fn=print,
    )
    print(json.dumps(doc, indent=1))


def cmd_ablate_partial(args) -> None:
    model, _ = load_checkpoint(args.model)
    freeze_model(model)
    data = load_dataset(args.data, model.config.frames)
    anchors = load_anchors(args.anchors)
    pert = load_perturbation(args.pert)
    spec = _load_spec(args)
    attack_cfg = AttackConfig(
        kind="noise", eps=pert.eps or 10 / 255, epochs=args.attack_epochs, seed=args.seed
    )
    doc = ablate_partial_sequence(
        model, data, attack_subset(data, spec), anchors, pert, args.out,
        attack_cfg=attack_cfg, log_fn=print,
    )
    print(json.dumps(doc, indent=1))


def cmd_ablate_patch(args) -> None:
    model, _ = load_checkpoint(args.model)
    freeze_model(model)
    data = load_dataset(args.data, model.config.frames)
    anchors = load_anchors(args.anchors)
    sizes = tuple(int(x) for x in args.sizes.split(","))
    if args.positions == "grid":
        positions = default_patch_positions(model.config.image_size, max(sizes))
    elif args.positions:
        positions = [parse_pos(p) for p in args.positions.split(";")]
    else:
        positions = None
    spec = _load_spec(args)
    doc = ablate_patch(
        model, data, attack_subset(data, spec), anchors, args.out,
        sizes=sizes, positions=positions, attack_epochs=args.attack_epochs,
        seed=args.seed, log_fn=print,
    )
    print(json.dumps(doc["position_spread"], indent=1))


def cmd_viz(args) -> None:
    paths = visualize_perturbation(load_perturbation(args.pert), args.out)
    print("\n".join(str(p) for p in paths))


def cmd_render(args) -> None:
    model, _ = load_checkpoint(args.model)
    data = load_dataset(args.data, model.config.frames)
    pert = load_perturbation(args.pert) if args.pert else None
    detections = detect_and_render(
        model, data[args.index], load_anchors(args.anchors), args.out,
        perturbation=pert, conf_threshold=args.conf,
    )
    print(f"{len(detections)} detections -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advfusion",
        description="Universal attacks and defenses for temporal-fusion detectors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic scene directories")
    p.add_argument("--out", required=True)
    p.add_argument("--train-scenes", type=int, default=200)
    p.add_argument("--val-scenes", type=int, default=50)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--t", type=int, default=4)
    p.add_argument("--keyframes", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("anchors", help="derive anchor shapes by IoU k-means")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--t", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_anchors)

    p = sub.add_parser("train", help="train the baseline detector")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--anchors", required=True)
    p.add_argument("--t", type=int, default=4)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--reverse", action="store_true", help="add order-reversed sequences")
    p.add_argument("--mirror", action="store_true", help="add mirrored sequences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="train a universal (or per-instance) perturbation")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--kind", choices=["noise", "patch"], default="noise")
    p.add_argument("--eps", type=parse_eps, default=10 / 255)
    p.add_argument("--patch-size", type=int, default=12)
    p.add_argument("--patch-pos", help="row,col of the patch top-left")
    p.add_argument("--objective", choices=["empty", "ascent"], default="empty")
    p.add_argument("--frame-mask", help="e.g. 1111; oldest frame first")
    p.add_argument("--share-frames", action="store_true",
                   help="single noise slice shared across frames")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--per-instance", type=int, default=None,
                   help="attack only this sample index (epochs count steps)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("defend", help="adversarial training")
    p.add_argument("--strategy", choices=["kpgd", "reuse", "rfgsm"], required=True)
    p.add_argument("--kind", choices=["noise", "patch"], default="noise")
    p.add_argument("--data", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--t", type=int, default=4)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--eps", type=parse_eps, default=10 / 255)
    p.add_argument("--patch-size", type=int, default=12)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--pool", help="directory of .bin patches (reuse strategy)")
    p.add_argument("--prob", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--reverse", action="store_true")
    p.add_argument("--mirror", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_defend)

    p = sub.add_parser("eval", help="mAP evaluation, optionally under a perturbation")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--pert")
    p.add_argument("--frame-mask", help="restrict the perturbation to these frames")
    p.add_argument("--conf", type=float, default=0.01)
    p.add_argument("--nms", type=float, default=0.5)
    p.add_argument("--match-iou", type=float, default=0.5)
    p.add_argument("--csv", help="append a model,attack,map row here")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("table", help="full baseline/defense x attack matrix")
    p.add_argument("--spec", help="ExperimentSpec JSON (defaults when omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_table)

    p = sub.add_parser("ablate-horizon", help="clean/attacked mAP per temporal horizon")
    p.add_argument("--spec")
    p.add_argument("--lengths", default="2,3,4")
    p.add_argument("--seeds", default="0")
    p.add_argument("--with-attack", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate_horizon)

    p = sub.add_parser("ablate-partial", help="partial-sequence attack table")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--pert", required=True, help="full-sequence noise perturbation")
    p.add_argument("--spec")
    p.add_argument("--attack-epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate_partial)

    p = sub.add_parser("ablate-patch", help="patch size/position sweep")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--sizes", default="12,8,5")
    p.add_argument("--positions", help="'grid' or 'r,c;r,c;...' (default: center only)")
    p.add_argument("--spec")
    p.add_argument("--attack-epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate_patch)

    p = sub.add_parser("viz", help="render a perturbation to PNG")
    p.add_argument("--pert", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("render", help="draw detections on a sample")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--pert")
    p.add_argument("--conf", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)

    return parser


def main(argv=None) -> None:
    args = build_parser().parse_args(argv)
    args.fn(args)


if __name__ == "__main__":
    main()
