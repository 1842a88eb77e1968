#!/usr/bin/env python3
"""Reproduce the full desk-scale result matrix (baseline + all defenses under
clean/patch/noise columns), the partial-sequence table, and the temporal-
horizon ablation. Expect a couple of hours on a 2-core CPU."""

import argparse
import json
from dataclasses import replace
from pathlib import Path

from advfusion.attacks import AttackConfig, load_perturbation, universal_attack
from advfusion.detector import freeze_model, load_checkpoint
from advfusion.evaluation import EvalConfig
from advfusion.harness import (
    DEFAULT_EXPERIMENT,
    ablate_horizon,
    ablate_partial_sequence,
    attack_subset,
    build_benchmark,
    run_table_experiment,
)
from advfusion.anchors import anchors_from_samples


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/full")
    parser.add_argument("--spec", help="ExperimentSpec JSON override")
    parser.add_argument("--skip-ablations", action="store_true")
    args = parser.parse_args()
    out = Path(args.out)

    spec = DEFAULT_EXPERIMENT
    if args.spec:
        from advfusion.harness import ExperimentSpec

        spec = ExperimentSpec.from_json(args.spec)

    doc = run_table_experiment(spec, out / "table", log_fn=print)
    print(json.dumps(doc["cells"], indent=1))
    if args.skip_ablations:
        return

    model, _ = load_checkpoint(out / "table" / "baseline.ckpt")
    freeze_model(model)
    train, val = build_benchmark(spec)
    anchors = anchors_from_samples(train, spec.anchors_k, seed=spec.seed)
    attack_set = attack_subset(train, spec)
    noise = load_perturbation(out / "table" / f"baseline_noise_{round(spec.noise_eps[-1]*255)}_255.bin")
    ablate_partial_sequence(
        model, val, attack_set, anchors, noise, out / "partial",
        attack_cfg=AttackConfig(kind="noise", eps=spec.noise_eps[-1], epochs=spec.attack_epochs),
        log_fn=print,
    )
    ablate_horizon(spec, out / "horizon", lengths=(2, 3, 4), seeds=(0, 1, 2), log_fn=print)


if __name__ == "__main__":
    main()
