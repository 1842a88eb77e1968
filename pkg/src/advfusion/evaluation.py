"""PASCAL-VOC-style detection evaluation: NMS, greedy matching, AP, mAP."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import iou
from .data import BoundingBox, SequenceSample


@dataclass(frozen=True)
class EvalConfig:
    conf_threshold: float = 0.01
    nms_iou: float = 0.5
    match_iou: float = 0.5
    ap_variant: str = "voc2010"  # or "voc2007" (11-point)

    def __post_init__(self) -> None:
        for v in (self.conf_threshold, self.nms_iou, self.match_iou):
            if not 0.0 <= v <= 1.0:
                raise ValueError("thresholds must lie in [0, 1]")
        if self.ap_variant not in ("voc2010", "voc2007"):
            raise ValueError(f"unknown AP variant {self.ap_variant!r}")


@dataclass
class EvalResult:
    """Per-class AP plus match bookkeeping; `map` averages classes with GT."""

    per_class_ap: dict[int, float | None]
    map: float
    n_gt: dict[int, int] = field(default_factory=dict)
    n_tp: dict[int, int] = field(default_factory=dict)
    n_fp: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class_ap": {str(c): ap for c, ap in self.per_class_ap.items()},
            "map": self.map,
            "n_gt": {str(c): v for c, v in self.n_gt.items()},
            "n_tp": {str(c): v for c, v in self.n_tp.items()},
            "n_fp": {str(c): v for c, v in self.n_fp.items()},
        }

    def save(self, path: Path | str, extra: dict | None = None) -> None:
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=1))


def _conf_order(confidences: np.ndarray) -> np.ndarray:
    # Stable descending sort so equal confidences keep input order.
    return np.argsort(-confidences, kind="stable")


def nms(detections: list[BoundingBox], iou_threshold: float) -> list[BoundingBox]:
    """Class-wise greedy suppression of overlaps above `iou_threshold`."""
    if not detections:
        return []
    confs = np.asarray([d.confidence for d in detections])
    kept: list[BoundingBox] = []
    for i in _conf_order(confs):
        cand = detections[int(i)]
        if all(
            k.class_id != cand.class_id or iou(k, cand) <= iou_threshold
            for k in kept
        ):
            kept.append(cand)
    return kept


def match_detections(
    detections: list[BoundingBox],
    ground_truth: list[BoundingBox] | tuple[BoundingBox, ...],
    match_iou: float = 0.5,
) -> list[bool]:
    """Greedy TP/FP flags, aligned with the input detection order.

    Detections are processed in descending confidence; each one claims the
    highest-IoU unmatched ground truth of its class when that IoU reaches
    `match_iou`, otherwise it is a false positive.
    """
    flags = [False] * len(detections)
    if not detections:
        return flags
    taken = [False] * len(ground_truth)
    confs = np.asarray([d.confidence for d in detections])
    for i in _conf_order(confs):
        det = detections[int(i)]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(ground_truth):
            if taken[j] or gt.class_id != det.class_id:
                continue
            overlap = iou(det, gt)
            if overlap > best_iou:
                best_iou, best_j = overlap, j
        if best_j >= 0 and best_iou >= match_iou:
            flags[int(i)] = True
            taken[best_j] = True
    return flags


def voc_ap(
    tp_flags: list[bool] | np.ndarray,
    confidences: list[float] | np.ndarray,
    n_gt: int,
    variant: str = "voc2010",
) -> float | None:
    """Average precision from pooled flags; None when the class has no GT."""
    tp_flags = np.asarray(tp_flags, dtype=bool)
    confidences = np.asarray(confidences, dtype=np.float64)
    if tp_flags.shape != confidences.shape:
        raise ValueError("tp_flags and confidences must have equal length")
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    if n_gt == 0:
        return None
    if tp_flags.size == 0:
        return 0.0

    order = _conf_order(confidences)
    tp = np.cumsum(tp_flags[order])
    fp = np.cumsum(~tp_flags[order])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)

    if variant == "voc2007":
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = recall >= t
            ap += (precision[mask].max() if mask.any() else 0.0) / 11.0
        return float(ap)

    # VOC2010 all-point: integrate the right-max precision envelope.
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def accumulate_matches(
    per_image: list[tuple[list[BoundingBox], list[bool]]],
    ground_truth_sets: list[tuple[BoundingBox, ...]],
) -> tuple[dict[int, list[bool]], dict[int, list[float]], dict[int, int]]:
    """Pool per-image flags/confidences per class and count GT boxes."""
    flags: dict[int, list[bool]] = {}
    confs: dict[int, list[float]] = {}
    n_gt: dict[int, int] = {}
    for gts in ground_truth_sets:
        for gt in gts:
            n_gt[gt.class_id] = n_gt.get(gt.class_id, 0) + 1
    for dets, det_flags in per_image:
        for det, flag in zip(dets, det_flags):
            flags.setdefault(det.class_id, []).append(flag)
            confs.setdefault(det.class_id, []).append(det.confidence)
    return flags, confs, n_gt


def summarize(
    flags: dict[int, list[bool]],
    confs: dict[int, list[float]],
    n_gt: dict[int, int],
    num_classes: int,
    variant: str = "voc2010",
) -> EvalResult:
    per_class_ap: dict[int, float | None] = {}
    n_tp: dict[int, int] = {}
    n_fp: dict[int, int] = {}
    aps = []
    for c in range(num_classes):
        gt_c = n_gt.get(c, 0)
        ap = voc_ap(flags.get(c, []), confs.get(c, []), gt_c, variant)
        per_class_ap[c] = ap
        n_tp[c] = int(sum(flags.get(c, [])))
        n_fp[c] = len(flags.get(c, [])) - n_tp[c]
        if ap is not None:
            aps.append(ap)
    return EvalResult(
        per_class_ap=per_class_ap,
        map=float(np.mean(aps)) if aps else 0.0,
        n_gt={c: n_gt.get(c, 0) for c in range(num_classes)},
        n_tp=n_tp,
        n_fp=n_fp,
    )


def evaluate_detections(
    detections_per_image: list[list[BoundingBox]],
    ground_truth_sets: list[tuple[BoundingBox, ...]],
    num_classes: int,
    config: EvalConfig | None = None,
) -> EvalResult:
    """Evaluate already-decoded detections (NMS is applied here)."""
    config = config or EvalConfig()
    per_image = []
    for dets, gts in zip(detections_per_image, ground_truth_sets):
        kept = nms(dets, config.nms_iou)
        per_image.append((kept, match_detections(kept, gts, config.match_iou)))
    flags, confs, n_gt = accumulate_matches(per_image, ground_truth_sets)
    return summarize(flags, confs, n_gt, num_classes, config.ap_variant)


def evaluate_map(
    model,
    samples: list[SequenceSample],
    anchors,
    config: EvalConfig | None = None,
    batch_size: int = 32,
) -> EvalResult:
    """Forward -> decode -> NMS -> match -> per-class AP over a sample list."""
    from .detector import decode, forward_batches

    config = config or EvalConfig()
    if not samples:
        raise ValueError("empty evaluation set")
    dets_per_image = [
        decode(grid, anchors, config.conf_threshold)
        for grid in forward_batches(model, samples, batch_size)
    ]
    gts = [s.labels for s in samples]
    return evaluate_detections(dets_per_image, gts, model.config.num_classes, config)
