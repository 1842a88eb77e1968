#!/usr/bin/env python3
"""End-to-end demo at reduced scale: train a small baseline, attack it with
universal noise and a patch, and drop renders + perturbation images into
runs/demo/. Takes a few minutes on CPU."""

import argparse
from dataclasses import replace
from pathlib import Path

from advfusion.anchors import anchors_from_samples
from advfusion.attacks import AttackConfig, apply_perturbation, universal_attack
from advfusion.data import SceneConfig, make_dataset
from advfusion.detector import ModelConfig, build_model, freeze_model, train_baseline
from advfusion.evaluation import evaluate_map
from advfusion.harness import detect_and_render, visualize_perturbation


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/demo")
    parser.add_argument("--scenes", type=int, default=60)
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--attack-epochs", type=int, default=40)
    args = parser.parse_args()
    out = Path(args.out)

    scene = SceneConfig()
    train = make_dataset(args.scenes, 0, scene, reverse=True, mirror=True)
    val = make_dataset(12, 1_000_000, scene)
    anchors = anchors_from_samples(train, k=8, seed=0)

    model = build_model(ModelConfig())
    model, _ = train_baseline(
        model, train, anchors, epochs=args.epochs, seed=0,
        lr=2e-3, weight_decay=1e-4, cosine_lr=True, log_fn=print,
    )
    freeze_model(model)
    print(f"clean mAP: {evaluate_map(model, val, anchors).map:.3f}")

    attack_set = [s for s in train if not s.scene_id.endswith("_rev")][:256]
    for name, cfg in (
        ("noise", AttackConfig(kind="noise", eps=10 / 255, epochs=args.attack_epochs)),
        ("patch", AttackConfig(kind="patch", patch_size=12, epochs=args.attack_epochs)),
    ):
        pert, _ = universal_attack(model, attack_set, cfg, anchors, log_fn=print)
        attacked = [apply_perturbation(s, pert) for s in val]
        print(f"{name}-attacked mAP: {evaluate_map(model, attacked, anchors).map:.3f}")
        visualize_perturbation(pert, out / f"{name}.png")
        detect_and_render(model, val[0], anchors, out / f"render_clean_{name}.png")
        detect_and_render(
            model, val[0], anchors, out / f"render_attacked_{name}.png", perturbation=pert
        )
    print(f"artifacts in {out}/")


if __name__ == "__main__":
    main()
