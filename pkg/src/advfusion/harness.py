"""Experiment orchestration: result tables, ablations, rendering, manifests.

Every run writes into a fresh directory: JSON + CSV tables, PNG figures, and
a manifest recording seeds, config hashes, and per-stage wall time so each
cell can be reproduced bit-identically.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import __version__
from .anchors import AnchorSet, anchors_from_samples
from .attacks import (
    AttackConfig,
    Perturbation,
    apply_perturbation,
    partial_sequence_eval,
    save_perturbation,
    universal_attack,
)
from .data import SceneConfig, SequenceSample, make_dataset
from .defense import (
    ATConfig,
    kpgd_adversarial_training,
    reuse_patch_training,
    rfgsm_training,
)
from .detector import (
    ModelConfig,
    TemporalDetector,
    build_model,
    decode,
    forward_batches,
    freeze_model,
    save_checkpoint,
    train_baseline,
)
from .evaluation import EvalConfig, evaluate_map

# The ten frame-mask rows of the partial-sequence study, oldest frame first.
DEFAULT_PARTIAL_MASKS: tuple[tuple[int, ...], ...] = (
    (0, 0, 0, 0),
    (1, 0, 0, 0),
    (0, 1, 0, 0),
    (0, 0, 1, 0),
    (0, 0, 0, 1),
    (1, 1, 0, 0),
    (1, 1, 1, 0),
    (0, 0, 1, 1),
    (0, 1, 1, 1),
    (1, 1, 1, 1),
)

ALL_DEFENSES = ("kpgd_noise", "kpgd_patch", "reuse_patch", "rfgsm")


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment = data + model + attack + defense settings + a seed."""

    name: str = "default"
    seed: int = 0
    train_scenes: int = 200
    val_scenes: int = 50
    scene: SceneConfig = field(default_factory=SceneConfig)
    augment_reverse: bool = True
    augment_mirror: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    anchors_k: int = 8
    train_epochs: int = 25
    train_lr: float = 1e-3
    train_weight_decay: float = 0.0
    train_cosine: bool = False
    batch_size: int = 16
    noise_eps: tuple[float, ...] = (5 / 255, 10 / 255)
    patch_size: int = 12
    attack_epochs: int = 100
    attack_samples: int = 256
    defenses: tuple[str, ...] = ()
    at_epochs: int = 12
    at_k: int = 5
    at_noise_eps: float = 10 / 255
    rfgsm_eps: float = 10 / 255
    patch_pool_size: int = 4
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        doc = dict(doc)
        if "scene" in doc:
            scene = dict(doc["scene"])
            for key in ("car_count", "ped_count", "distractor_count", "velocity_range"):
                if key in scene:
                    scene[key] = tuple(scene[key])
            doc["scene"] = SceneConfig(**scene)
        if "model" in doc:
            doc["model"] = ModelConfig.from_dict(doc["model"])
        if "eval" in doc:
            doc["eval"] = EvalConfig(**doc["eval"])
        for key in ("noise_eps", "defenses"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    @classmethod
    def from_json(cls, path: Path | str) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class RunLog:
    """Collects per-stage wall time and artifact names for the manifest."""

    def __init__(self, out_dir: Path | str, spec_doc: dict, log_fn=None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.spec_doc = spec_doc
        self.stages: list[dict] = []
        self.log_fn = log_fn

    def stage(self, name: str):
        log = self

        class _Stage:
            def __enter__(self):
                self.t0 = time.time()
                if log.log_fn:
                    log.log_fn(f"[stage] {name} ...")
                return self

            def __exit__(self, exc_type, exc, tb):
                log.stages.append(
                    {"stage": name, "seconds": round(time.time() - self.t0, 2)}
                )
                if log.log_fn and exc_type is None:
                    log.log_fn(f"[stage] {name} done in {log.stages[-1]['seconds']}s")
                return False

        return _Stage()

    def write_manifest(self) -> Path:
        path = self.out_dir / "manifest.json"
        path.write_text(
            json.dumps(
                {
                    "tool_version": __version__,
                    "config_hash": config_hash(self.spec_doc),
                    "spec": self.spec_doc,
                    "stages": self.stages,
                },
                indent=1,
            )
        )
        return path


def build_benchmark(spec: ExperimentSpec):
    """(train samples, val samples) for a spec; val is never augmented."""
    scene = replace(spec.scene, sequence_length=spec.model.frames)
    train = make_dataset(
        spec.train_scenes, spec.seed, scene,
        reverse=spec.augment_reverse, mirror=spec.augment_mirror,
    )
    val = make_dataset(spec.val_scenes, spec.seed + 1_000_000, scene)
    return train, val


def attack_subset(train: list[SequenceSample], spec: ExperimentSpec) -> list[SequenceSample]:
    """Deterministic unaugmented subset the attacks are trained on."""
    base = [s for s in train if not s.scene_id.endswith("_rev")]
    rng = np.random.default_rng(spec.seed + 31)
    if len(base) <= spec.attack_samples:
        return base
    idx = rng.choice(len(base), size=spec.attack_samples, replace=False)
    return [base[int(i)] for i in sorted(idx)]


def train_spec_baseline(spec: ExperimentSpec, train, anchors: AnchorSet, log_fn=None):
    model = build_model(spec.model)
    model, history = train_baseline(
        model, train, anchors, spec.train_epochs,
        seed=spec.seed, batch_size=spec.batch_size, lr=spec.train_lr,
        weight_decay=spec.train_weight_decay, cosine_lr=spec.train_cosine,
        log_fn=log_fn,
    )
    return freeze_model(model), history


def _attack_columns(spec: ExperimentSpec) -> list[tuple[str, AttackConfig]]:
    cols = [
        (
            "patch",
            AttackConfig(
                kind="patch", patch_size=spec.patch_size,
                epochs=spec.attack_epochs, batch_size=spec.batch_size,
                seed=spec.seed + 11,
            ),
        )
    ]
    for eps in spec.noise_eps:
        cols.append(
            (
                f"noise_{round(eps * 255)}_255",
                AttackConfig(
                    kind="noise", eps=eps, epochs=spec.attack_epochs,
                    batch_size=spec.batch_size, seed=spec.seed + 13,
                ),
            )
        )
    return cols


def make_patch_pool(
    model: TemporalDetector, attack_set, anchors: AnchorSet, spec: ExperimentSpec,
    log_fn=None,
) -> list[Perturbation]:
    pool = []
    for i in range(spec.patch_pool_size):
        cfg = AttackConfig(
            kind="patch", patch_size=spec.patch_size, epochs=spec.attack_epochs,
            batch_size=spec.batch_size, seed=spec.seed + 211 + i,
        )
        pert, _ = universal_attack(model, attack_set, cfg, anchors, log_fn=log_fn)
        pool.append(pert)
    return pool


def train_defense(
    name: str,
    spec: ExperimentSpec,
    train,
    anchors: AnchorSet,
    baseline: TemporalDetector,
    attack_set,
    log_fn=None,
) -> TemporalDetector:
    """Train one defense row from scratch with the spec's AT settings."""
    model = build_model(replace(spec.model, seed=spec.model.seed + 1))
    if name == "kpgd_noise":
        cfg = ATConfig(
            strategy="kpgd", kind="noise", eps=spec.at_noise_eps, k=spec.at_k,
            epochs=spec.at_epochs, batch_size=spec.batch_size, lr=spec.train_lr,
            seed=spec.seed + 3,
        )
        model, _ = kpgd_adversarial_training(model, train, anchors, cfg, log_fn=log_fn)
    elif name == "kpgd_patch":
        cfg = ATConfig(
            strategy="kpgd", kind="patch", patch_size=spec.patch_size, k=spec.at_k,
            epochs=spec.at_epochs, batch_size=spec.batch_size, lr=spec.train_lr,
            seed=spec.seed + 4,
        )
        model, _ = kpgd_adversarial_training(model, train, anchors, cfg, log_fn=log_fn)
    elif name == "reuse_patch":
        pool = make_patch_pool(baseline, attack_set, anchors, spec, log_fn=log_fn)
        cfg = ATConfig(
            strategy="reuse_patch", epochs=spec.at_epochs, batch_size=spec.batch_size,
            lr=spec.train_lr, seed=spec.seed + 5,
        )
        model, _ = reuse_patch_training(model, train, anchors, pool, cfg, log_fn=log_fn)
    elif name == "rfgsm":
        cfg = ATConfig(
            strategy="rfgsm", eps=spec.rfgsm_eps, epochs=spec.at_epochs,
            batch_size=spec.batch_size, lr=spec.train_lr, seed=spec.seed + 6,
        )
        model, _ = rfgsm_training(model, train, anchors, cfg, log_fn=log_fn)
    else:
        raise ValueError(f"unknown defense {name!r}")
    return freeze_model(model)


def evaluate_under_attack(
    model: TemporalDetector,
    val,
    attack_set,
    anchors: AnchorSet,
    attack_cfg: AttackConfig,
    eval_cfg: EvalConfig,
    log_fn=None,
) -> tuple[float, Perturbation]:
    """Train a fresh universal perturbation against `model`, then measure mAP."""
    pert, _ = universal_attack(model, attack_set, attack_cfg, anchors, log_fn=log_fn)
    attacked = [apply_perturbation(s, pert) for s in val]
    result = evaluate_map(model, attacked, anchors, eval_cfg)
    return result.map, pert


def run_table_experiment(spec: ExperimentSpec, out_dir: Path | str, log_fn=None) -> dict:
    """The paper-style matrix: rows = baseline + defenses, columns = clean +
    universal patch + universal noise per eps; each attacked cell uses a fresh
    perturbation trained against that row's model. Writes CSV/JSON/manifest.
    """
    runlog = RunLog(out_dir, spec.to_dict(), log_fn=log_fn)
    out = runlog.out_dir

    with runlog.stage("gen-data"):
        train, val = build_benchmark(spec)
        attack_set = attack_subset(train, spec)
    with runlog.stage("anchors"):
        anchors = anchors_from_samples(train, spec.anchors_k, seed=spec.seed)
    with runlog.stage("train-baseline"):
        baseline, _ = train_spec_baseline(spec, train, anchors, log_fn=log_fn)
        save_checkpoint(out / "baseline.ckpt", baseline, {"seed": spec.seed})

    rows: dict[str, TemporalDetector] = {"baseline": baseline}
    for name in spec.defenses:
        with runlog.stage(f"defend-{name}"):
            rows[name] = train_defense(
                name, spec, train, anchors, baseline, attack_set, log_fn=log_fn
            )
            save_checkpoint(out / f"{name}.ckpt", rows[name], {"seed": spec.seed})

    cols = _attack_columns(spec)
    table: dict[str, dict[str, float]] = {}
    for row_name, model in rows.items():
        cells: dict[str, float] = {}
        with runlog.stage(f"eval-{row_name}-clean"):
            cells["no_attack"] = evaluate_map(model, val, anchors, spec.eval).map
        for col_name, attack_cfg in cols:
            with runlog.stage(f"attack-{row_name}-{col_name}"):
                score, pert = evaluate_under_attack(
                    model, val, attack_set, anchors, attack_cfg, spec.eval, log_fn=log_fn
                )
                cells[col_name] = score
                save_perturbation(out / f"{row_name}_{col_name}.bin", pert)
        table[row_name] = cells

    col_names = ["no_attack"] + [c for c, _ in cols]
    doc = {"rows": list(table.keys()), "columns": col_names, "cells": table}
    (out / "table.json").write_text(json.dumps(doc, indent=1))
    with (out / "table.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model"] + col_names)
        for row_name, cells in table.items():
            writer.writerow([row_name] + [f"{cells[c]:.6f}" for c in col_names])
    runlog.write_manifest()
    return doc


def ablate_horizon(
    spec: ExperimentSpec,
    out_dir: Path | str,
    lengths: tuple[int, ...] = (2, 3, 4),
    seeds: tuple[int, ...] = (0,),
    with_attack: bool = False,
    attack_eps: float = 10 / 255,
    log_fn=None,
) -> dict:
    """Train one model per temporal horizon (and seed); report clean mAP and,
    optionally, mAP under a fresh universal noise attack."""
    runlog = RunLog(out_dir, {"spec": spec.to_dict(), "lengths": lengths, "seeds": seeds}, log_fn)
    results: list[dict] = []
    for t in lengths:
        for seed in seeds:
            sub = replace(
                spec,
                seed=spec.seed + seed,
                model=replace(spec.model, frames=t, seed=spec.model.seed + seed),
            )
            with runlog.stage(f"horizon-T{t}-seed{seed}"):
                train, val = build_benchmark(sub)
                anchors = anchors_from_samples(train, sub.anchors_k, seed=sub.seed)
                model, _ = train_spec_baseline(sub, train, anchors, log_fn=log_fn)
                entry = {
                    "frames": t,
                    "seed": seed,
                    "clean_map": evaluate_map(model, val, anchors, sub.eval).map,
                }
                if with_attack:
                    cfg = AttackConfig(
                        kind="noise", eps=attack_eps, epochs=sub.attack_epochs,
                        batch_size=sub.batch_size, seed=sub.seed + 13,
                    )
                    entry["attacked_map"], _ = evaluate_under_attack(
                        model, val, attack_subset(train, sub), anchors, cfg, sub.eval,
                        log_fn=log_fn,
                    )
                results.append(entry)
    doc = {"results": results}
    (runlog.out_dir / "horizon.json").write_text(json.dumps(doc, indent=1))
    with (runlog.out_dir / "horizon.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        keys = ["frames", "seed", "clean_map"] + (["attacked_map"] if with_attack else [])
        writer.writerow(keys)
        for entry in results:
            writer.writerow([entry[k] for k in keys])
    runlog.write_manifest()
    return doc


def ablate_partial_sequence(
    model: TemporalDetector,
    val,
    attack_set,
    anchors: AnchorSet,
    full_noise: Perturbation,
    out_dir: Path | str,
    masks=DEFAULT_PARTIAL_MASKS,
    attack_cfg: AttackConfig | None = None,
    eval_cfg: EvalConfig | None = None,
    log_fn=None,
) -> dict:
    """For every mask: (a) the full-sequence noise restricted to the mask and
    (b) a perturbation freshly trained with that mask. The all-true mask
    reuses the full perturbation for (b); the empty mask means no attack.
    """
    eval_cfg = eval_cfg or EvalConfig()
    attack_cfg = attack_cfg or AttackConfig(kind="noise", eps=full_noise.eps)
    runlog = RunLog(out_dir, {"masks": [list(m) for m in masks]}, log_fn)
    clean = evaluate_map(model, val, anchors, eval_cfg).map
    rows = []
    for mask in masks:
        mask_bool = np.asarray(mask, dtype=bool)
        name = "".join(str(int(m)) for m in mask)
        with runlog.stage(f"mask-{name}"):
            if not mask_bool.any():
                restricted = specific = clean
            else:
                restricted = partial_sequence_eval(
                    model, val, full_noise, mask_bool, anchors, eval_cfg
                ).map
                if mask_bool.all():
                    pert = full_noise
                else:
                    cfg = replace(attack_cfg, frame_mask=tuple(bool(m) for m in mask))
                    pert, _ = universal_attack(model, attack_set, cfg, anchors, log_fn=log_fn)
                specific = partial_sequence_eval(
                    model, val, pert, mask_bool, anchors, eval_cfg
                ).map
        rows.append({"mask": name, "restricted_full": restricted, "mask_specific": specific})
    doc = {"clean_map": clean, "rows": rows}
    (runlog.out_dir / "partial.json").write_text(json.dumps(doc, indent=1))
    with (runlog.out_dir / "partial.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mask", "restricted_full", "mask_specific"])
        for row in rows:
            writer.writerow([row["mask"], row["restricted_full"], row["mask_specific"]])
    runlog.write_manifest()
    return doc


def default_patch_positions(image_size: tuple[int, int], patch_size: int) -> list[tuple[int, int]]:
    """3x3 lattice of placements spanning the image, center included."""
    h, w = image_size
    rows = [0, (h - patch_size) // 2, h - patch_size]
    cols = [0, (w - patch_size) // 2, w - patch_size]
    return [(r, c) for r in rows for c in cols]


def ablate_patch(
    model: TemporalDetector,
    val,
    attack_set,
    anchors: AnchorSet,
    out_dir: Path | str,
    sizes: tuple[int, ...] = (12, 8, 5),
    positions: list[tuple[int, int]] | None = None,
    attack_epochs: int = 100,
    batch_size: int = 16,
    seed: int = 0,
    eval_cfg: EvalConfig | None = None,
    log_fn=None,
) -> dict:
    """Sweep patch sizes and positions; one fresh attack per cell. An empty
    position list means a size-only sweep at the default (center) position."""
    eval_cfg = eval_cfg or EvalConfig()
    runlog = RunLog(out_dir, {"sizes": list(sizes), "positions": positions}, log_fn)
    cells = []
    for size in sizes:
        pos_list = positions if positions else [None]
        for pos in pos_list:
            cfg = AttackConfig(
                kind="patch", patch_size=size, patch_pos=pos,
                epochs=attack_epochs, batch_size=batch_size, seed=seed + 17,
            )
            label = "center" if pos is None else f"{pos[0]},{pos[1]}"
            with runlog.stage(f"patch-{size}-{label}"):
                score, pert = evaluate_under_attack(
                    model, val, attack_set, anchors, cfg, eval_cfg, log_fn=log_fn
                )
            cells.append({"size": size, "position": label, "map": score})
    by_size: dict[int, list[float]] = {}
    for cell in cells:
        by_size.setdefault(cell["size"], []).append(cell["map"])
    spread = {
        str(size): (max(scores) - min(scores)) for size, scores in by_size.items()
    }
    doc = {"cells": cells, "position_spread": spread}
    (runlog.out_dir / "patch_sweep.json").write_text(json.dumps(doc, indent=1))
    with (runlog.out_dir / "patch_sweep.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["size", "position", "map"])
        for cell in cells:
            writer.writerow([cell["size"], cell["position"], cell["map"]])
    runlog.write_manifest()
    return doc


def visualize_perturbation(perturbation: Perturbation, out_path: Path | str) -> list[Path]:
    """PNG rendering: noise maps [-eps, +eps] affinely onto [0, 255] (zero ->
    128 under round-half-even), one image per frame slice; patch values map
    [0, 1] -> [0, 255] directly."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if perturbation.kind == "patch":
        u8 = np.round(np.clip(perturbation.values, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(u8).save(out_path)
        return [out_path]
    eps = perturbation.eps
    values = perturbation.values
    paths = []
    for t in range(values.shape[0]):
        scaled = (values[t] + eps) / (2 * eps) * 255.0
        u8 = np.clip(np.round(scaled), 0, 255).astype(np.uint8)
        if values.shape[0] == 1:
            path = out_path
        else:
            path = out_path.with_name(f"{out_path.stem}_f{t}{out_path.suffix}")
        Image.fromarray(u8).save(path)
        paths.append(path)
    return paths


CLASS_NAMES = {0: "car", 1: "ped"}
CLASS_COLORS = {0: (255, 64, 64), 1: (64, 160, 255)}


def detect_and_render(
    model: TemporalDetector,
    sample: SequenceSample,
    anchors: AnchorSet,
    out_path: Path | str,
    perturbation: Perturbation | None = None,
    conf_threshold: float = 0.5,
    nms_iou: float = 0.5,
    scale: int = 3,
):
    """Render the last frame with predicted boxes (class + confidence); the
    perturbation, when given, is applied before inference."""
    from .evaluation import nms

    if perturbation is not None:
        sample = apply_perturbation(sample, perturbation)
    grid = next(iter(forward_batches(model, [sample], batch_size=1)))
    detections = nms(decode(grid, anchors, conf_threshold), nms_iou)

    frame = sample.frames[-1]
    h, w = frame.shape[:2]
    img = Image.fromarray(np.round(frame * 255).astype(np.uint8)).resize(
        (w * scale, h * scale), Image.NEAREST
    )
    draw = ImageDraw.Draw(img)
    for det in detections:
        x1, y1, x2, y2 = det.corners()
        color = CLASS_COLORS.get(det.class_id, (255, 255, 0))
        draw.rectangle(
            [x1 * w * scale, y1 * h * scale, x2 * w * scale, y2 * h * scale],
            outline=color, width=2,
        )
        label = f"{CLASS_NAMES.get(det.class_id, det.class_id)} {det.confidence:.2f}"
        draw.text((x1 * w * scale + 2, max(y1 * h * scale - 12, 0)), label, fill=color)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    img.save(out_path)
    return detections
