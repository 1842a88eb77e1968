"""IoU primitives and anchor shape derivation by k-means with IoU distance."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import BoundingBox


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; raises on a zero-area box."""
    if a.w <= 0 or a.h <= 0 or b.w <= 0 or b.h <= 0:
        raise ValueError("degenerate box")
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area() + b.area() - inter)


def shape_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """IoU of two co-centered boxes given only their (w, h) shapes."""
    wa, ha = a
    wb, hb = b
    if wa <= 0 or ha <= 0 or wb <= 0 or hb <= 0:
        raise ValueError("degenerate box")
    inter = min(wa, wb) * min(ha, hb)
    return inter / (wa * ha + wb * hb - inter)


def _shape_iou_matrix(shapes: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(N, K) co-centered IoU between every shape and every centroid."""
    inter = np.minimum(shapes[:, None, 0], centroids[None, :, 0]) * np.minimum(
        shapes[:, None, 1], centroids[None, :, 1]
    )
    areas = shapes[:, 0] * shapes[:, 1]
    careas = centroids[:, 0] * centroids[:, 1]
    return inter / (areas[:, None] + careas[None, :] - inter)


@dataclass(frozen=True)
class AnchorSet:
    """K prior (w, h) shapes in canonical order (area ascending)."""

    shapes: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if len(self.shapes) < 1:
            raise ValueError("need at least one anchor")
        for w, h in self.shapes:
            if not (0 < w <= 1 and 0 < h <= 1):
                raise ValueError(f"anchor shape out of range: {(w, h)}")
        ordered = tuple(sorted(self.shapes, key=lambda s: (s[0] * s[1], s[0])))
        object.__setattr__(self, "shapes", ordered)

    def __len__(self) -> int:
        return len(self.shapes)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.shapes, dtype=np.float64)


def kmeans_iou_trace(
    boxes: list[tuple[float, float]] | np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
) -> tuple[AnchorSet, list[float]]:
    """Lloyd k-means under d = 1 - shape_iou, returning the objective trace.

    Centroids update to the per-cluster mean of (w, h); a mean that would
    raise its own cluster's cost is rejected in favor of the previous
    centroid, which keeps the traced objective non-increasing. An emptied
    cluster is re-seeded from the box currently farthest from its centroid.
    """
    shapes = np.asarray(boxes, dtype=np.float64)
    if shapes.ndim != 2 or shapes.shape[1] != 2:
        raise ValueError("boxes must be (N, 2) of (w, h)")
    n = shapes.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    if np.any(shapes <= 0):
        raise ValueError("degenerate box")

    rng = np.random.default_rng(seed)
    centroids = shapes[rng.choice(n, size=k, replace=False)].copy()
    assignments = np.full(n, -1, dtype=np.int64)
    history: list[float] = []

    for _ in range(max_iter):
        dist = 1.0 - _shape_iou_matrix(shapes, centroids)
        new_assign = np.argmin(dist, axis=1)

        # Re-seed empty clusters from the farthest remaining box.
        point_dist = dist[np.arange(n), new_assign].copy()
        for j in range(k):
            if not np.any(new_assign == j):
                far = int(np.argmax(point_dist))
                centroids[j] = shapes[far]
                new_assign[far] = j
                point_dist[far] = 0.0

        history.append(float((1.0 - _shape_iou_matrix(shapes, centroids))[
            np.arange(n), new_assign
        ].sum()))

        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign

        for j in range(k):
            members = shapes[assignments == j]
            mean = members.mean(axis=0)
            old_cost = (1.0 - _shape_iou_matrix(members, centroids[j][None])).sum()
            new_cost = (1.0 - _shape_iou_matrix(members, mean[None])).sum()
            if new_cost <= old_cost:
                centroids[j] = mean

    anchors = AnchorSet(tuple((float(w), float(h)) for w, h in centroids))
    return anchors, history


def kmeans_iou(
    boxes: list[tuple[float, float]] | np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
) -> AnchorSet:
    anchors, _ = kmeans_iou_trace(boxes, k, seed=seed, max_iter=max_iter)
    return anchors


def anchors_from_samples(samples, k: int = 8, seed: int = 0) -> AnchorSet:
    """Cluster the (w, h) of every ground-truth box in a sample list."""
    shapes = [(box.w, box.h) for s in samples for box in s.labels]
    if len(shapes) < k:
        raise ValueError(f"only {len(shapes)} boxes for k={k}")
    return kmeans_iou(shapes, k, seed=seed)


def save_anchors(path: Path | str, anchors: AnchorSet) -> None:
    Path(path).write_text(json.dumps({"shapes": [list(s) for s in anchors.shapes]}))


def load_anchors(path: Path | str) -> AnchorSet:
    doc = json.loads(Path(path).read_text())
    return AnchorSet(tuple((float(w), float(h)) for w, h in doc["shapes"]))
