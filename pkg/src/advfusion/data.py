"""Synthetic moving-shapes scenes and temporal sequence construction.

A scene is a short clip of solid rectangles drifting over a smooth random
background: wide "car" rectangles with horizontal motion (class 0), tall thin
"pedestrian" rectangles with slow motion (class 1), plus unlabeled static
distractor rectangles so that motion, not appearance alone, identifies an
object. Sequences of T consecutive keyframes are the unit of training,
attack, and evaluation; labels always refer to the last frame of a sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

# Box coordinates are snapped to this dyadic grid. 1/32768 is ~0.005 px at
# the default width, far below labeling precision, and it makes coordinate
# reflections (1 - cx) exact in floating point, so mirroring is an involution.
COORD_GRID = 1 << 15


def snap_coord(x: float) -> float:
    return round(float(x) * COORD_GRID) / COORD_GRID


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized image coordinates (center + size)."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int
    confidence: float = 1.0

    def corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2) extents, still normalized."""
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def area(self) -> float:
        return self.w * self.h

    def clipped(self) -> "BoundingBox":
        """Clip extents to the image and rebuild; raises if nothing remains."""
        x1, y1, x2, y2 = self.corners()
        x1, y1 = max(x1, 0.0), max(y1, 0.0)
        x2, y2 = min(x2, 1.0), min(y2, 1.0)
        if x2 <= x1 or y2 <= y1:
            raise ValueError("box clipped to nothing")
        return replace(
            self, cx=(x1 + x2) / 2, cy=(y1 + y2) / 2, w=x2 - x1, h=y2 - y1
        )

    def mirrored(self) -> "BoundingBox":
        return replace(self, cx=1.0 - self.cx)


@dataclass(frozen=True, eq=False)
class Keyframe:
    """One rendered frame of a scene with the boxes of its labeled objects."""

    index: int
    image: np.ndarray  # (H, W, 3) float32 in [0, 1], quantized to the u8 grid
    boxes: tuple[BoundingBox, ...]


@dataclass(frozen=True, eq=False)
class SequenceSample:
    """T ordered frames plus ground-truth boxes for the last frame."""

    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    labels: tuple[BoundingBox, ...]
    scene_id: str = ""
    frame_indices: tuple[int, ...] = ()


@dataclass(frozen=True)
class SceneConfig:
    """Everything that determines one scene; `seed` fixes it completely.

    `frame_stride` is the displacement multiplier per keyframe step (pixels),
    the synthetic stand-in for the temporal spacing of real clips. Per-class
    count ranges are inclusive; class imbalance is set through them (default
    expectation 2 cars : 1 pedestrian).
    """

    height: int = 96
    width: int = 160
    sequence_length: int = 4  # T
    num_keyframes: int = 7
    frame_stride: float = 2.0
    car_count: tuple[int, int] = (1, 3)
    ped_count: tuple[int, int] = (0, 2)
    distractor_count: tuple[int, int] = (1, 2)
    velocity_range: tuple[float, float] = (0.5, 1.5)
    noise_sigma: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")
        if self.num_keyframes < self.sequence_length:
            raise ValueError("num_keyframes must be >= sequence_length")
        if self.frame_stride < 0:
            raise ValueError("frame_stride must be >= 0")
        if max(self.car_count[1], self.ped_count[1]) <= 0:
            raise ValueError("empty scene: no objects of any class")


@dataclass(frozen=True)
class _ObjectState:
    """Internal per-object motion state; class_id -1 marks a distractor."""

    class_id: int
    x: float  # center, px, at keyframe 0
    y: float
    w: float  # px
    h: float
    vx: float  # px per keyframe step
    vy: float
    color: tuple[float, float, float]


def _sample_shape(rng: np.random.Generator, class_id: int) -> tuple[float, float]:
    """Pixel (w, h) for a class: cars wide and flat, pedestrians tall and thin."""
    if class_id == 0:
        w = rng.uniform(18.0, 34.0)
        h = w * rng.uniform(0.35, 0.55)
    else:
        w = rng.uniform(7.0, 12.0)
        h = w * rng.uniform(2.2, 3.2)
    return w, h


def _sample_color(rng: np.random.Generator) -> tuple[float, float, float]:
    # Either dark or bright, away from the mid-range background.
    lo, hi = ((0.0, 0.22) if rng.random() < 0.5 else (0.78, 1.0))
    return tuple(rng.uniform(lo, hi, size=3).tolist())


def _fit_start(rng: np.random.Generator, size: float, v: float, steps: int,
               extent: float) -> float:
    """Start coordinate keeping the full box inside `extent` for all steps."""
    total = v * steps
    lo = size / 2 + max(0.0, -total)
    hi = extent - size / 2 - max(0.0, total)
    if hi <= lo:
        return extent / 2
    return rng.uniform(lo, hi)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth per-scene gradient: bilinear blend of four mid-range corner colors."""
    corners = rng.uniform(0.35, 0.65, size=(2, 2, 3))
    ys = np.linspace(0.0, 1.0, h)[:, None, None]
    xs = np.linspace(0.0, 1.0, w)[None, :, None]
    top = corners[0, 0] * (1 - xs) + corners[0, 1] * xs
    bot = corners[1, 0] * (1 - xs) + corners[1, 1] * xs
    return (top * (1 - ys) + bot * ys).astype(np.float64)


def _quantize_image(img: np.ndarray) -> np.ndarray:
    """Snap to the u8 grid so PNG round-trips are bit exact."""
    u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return (u8.astype(np.float64) / 255.0).astype(np.float32)


def generate_scene(config: SceneConfig) -> list[Keyframe]:
    """Render all keyframes of one scene.

    Objects move with constant per-object velocity and are placed so their
    boxes stay inside the image for the whole clip. Output is a pure function
    of the config (including its seed).
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    h, w = config.height, config.width

    counts = {
        0: int(rng.integers(config.car_count[0], config.car_count[1] + 1)),
        1: int(rng.integers(config.ped_count[0], config.ped_count[1] + 1)),
    }
    n_distract = int(
        rng.integers(config.distractor_count[0], config.distractor_count[1] + 1)
    )

    steps = config.num_keyframes - 1
    objects: list[_ObjectState] = []

    def overlaps_existing(cand: _ObjectState) -> bool:
        for k in (0, steps):
            cx, cy = cand.x + k * cand.vx, cand.y + k * cand.vy
            for other in objects:
                ox, oy = other.x + k * other.vx, other.y + k * other.vy
                if (
                    abs(cx - ox) < 0.7 * (cand.w + other.w) / 2
                    and abs(cy - oy) < 0.7 * (cand.h + other.h) / 2
                ):
                    return True
        return False

    def place(class_id: int, bw: float, bh: float, vx: float, vy: float):
        # a few placement retries keep objects from hiding one another
        cand = None
        for _ in range(20):
            x = _fit_start(rng, bw, vx, steps, float(w))
            y = _fit_start(rng, bh, vy, steps, float(h))
            cand = _ObjectState(class_id, x, y, bw, bh, vx, vy, _sample_color(rng))
            if not overlaps_existing(cand):
                break
        objects.append(cand)

    for class_id in (0, 1):
        for _ in range(counts[class_id]):
            bw, bh = _sample_shape(rng, class_id)
            speed = rng.uniform(*config.velocity_range) * config.frame_stride
            if class_id == 0:
                vx = speed * (1.0 if rng.random() < 0.5 else -1.0)
                vy = 0.0
            else:
                vx = 0.6 * speed * (1.0 if rng.random() < 0.5 else -1.0)
                vy = rng.uniform(-0.4, 0.4) * config.frame_stride
            place(class_id, bw, bh, vx, vy)
    for _ in range(n_distract):
        bw, bh = _sample_shape(rng, int(rng.integers(0, 2)))
        place(-1, bw, bh, 0.0, 0.0)
    # distractors render first so they never occlude a labeled object
    objects.sort(key=lambda o: 0 if o.class_id < 0 else 1)

    background = _background(rng, h, w)
    keyframes = []
    for k in range(config.num_keyframes):
        img = background + rng.normal(0.0, config.noise_sigma, size=(h, w, 3))
        boxes = []
        for obj in objects:
            x = obj.x + k * obj.vx
            y = obj.y + k * obj.vy
            x0 = max(0, int(round(x - obj.w / 2)))
            x1 = min(w, int(round(x + obj.w / 2)))
            y0 = max(0, int(round(y - obj.h / 2)))
            y1 = min(h, int(round(y + obj.h / 2)))
            img[y0:y1, x0:x1] = obj.color
            if obj.class_id >= 0:
                box = BoundingBox(
                    cx=snap_coord(x / w),
                    cy=snap_coord(y / h),
                    w=snap_coord(obj.w / w),
                    h=snap_coord(obj.h / h),
                    class_id=obj.class_id,
                ).clipped()
                boxes.append(box)
        keyframes.append(Keyframe(index=k, image=_quantize_image(img), boxes=tuple(boxes)))
    return keyframes


def build_sequences(keyframes: list[Keyframe], t: int,
                    scene_id: str = "") -> list[SequenceSample]:
    """Sliding windows of length `t`, stride 1; labels from each window's last frame.

    Fewer than `t` keyframes yields an empty list.
    """
    if t < 1:
        raise ValueError("sequence length must be >= 1")
    samples = []
    for i in range(len(keyframes) - t + 1):
        window = keyframes[i : i + t]
        frames = np.stack([kf.image for kf in window]).astype(np.float32)
        samples.append(
            SequenceSample(
                frames=frames,
                labels=window[-1].boxes,
                scene_id=scene_id,
                frame_indices=tuple(kf.index for kf in window),
            )
        )
    return samples


def reverse_augment(keyframes: list[Keyframe]) -> list[Keyframe]:
    """Invert keyframe order; window labels then come from the new last frame."""
    if not keyframes:
        raise ValueError("no keyframes to reverse")
    return list(reversed(keyframes))


def mirror_augment(sample: SequenceSample) -> SequenceSample:
    """Flip every frame left-right and reflect box centers (cx -> 1 - cx)."""
    frames = np.ascontiguousarray(sample.frames[:, :, ::-1, :])
    labels = tuple(box.mirrored() for box in sample.labels)
    return replace(sample, frames=frames, labels=labels)


def make_dataset(
    num_scenes: int,
    base_seed: int,
    config: SceneConfig | None = None,
    reverse: bool = False,
    mirror: bool = False,
) -> list[SequenceSample]:
    """Generate `num_scenes` scenes (seeds base_seed..) and window them into samples."""
    config = config or SceneConfig()
    samples: list[SequenceSample] = []
    for i in range(num_scenes):
        cfg = replace(config, seed=base_seed + i)
        scene_id = f"scene_{cfg.seed:06d}"
        keyframes = generate_scene(cfg)
        samples.extend(build_sequences(keyframes, cfg.sequence_length, scene_id))
        if reverse:
            samples.extend(
                build_sequences(
                    reverse_augment(keyframes), cfg.sequence_length, scene_id + "_rev"
                )
            )
    if mirror:
        samples.extend(mirror_augment(s) for s in list(samples))
    return samples


def save_scene(root: Path | str, scene_id: str, keyframes: list[Keyframe]) -> Path:
    """Write `<root>/<scene_id>/frame_<k>.png` plus `labels.json`."""
    scene_dir = Path(root) / scene_id
    scene_dir.mkdir(parents=True, exist_ok=True)
    frames_doc = []
    for kf in keyframes:
        u8 = np.round(kf.image * 255.0).astype(np.uint8)
        Image.fromarray(u8).save(scene_dir / f"frame_{kf.index}.png")
        frames_doc.append(
            {
                "index": kf.index,
                "boxes": [
                    {"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h, "class": b.class_id}
                    for b in kf.boxes
                ],
            }
        )
    (scene_dir / "labels.json").write_text(json.dumps({"frames": frames_doc}, indent=1))
    return scene_dir


def load_scene(scene_dir: Path | str) -> list[Keyframe]:
    scene_dir = Path(scene_dir)
    doc = json.loads((scene_dir / "labels.json").read_text())
    keyframes = []
    for entry in doc["frames"]:
        k = entry["index"]
        u8 = np.asarray(Image.open(scene_dir / f"frame_{k}.png"))
        image = (u8.astype(np.float64) / 255.0).astype(np.float32)
        boxes = tuple(
            BoundingBox(b["cx"], b["cy"], b["w"], b["h"], b["class"])
            for b in entry["boxes"]
        )
        keyframes.append(Keyframe(index=k, image=image, boxes=boxes))
    return sorted(keyframes, key=lambda kf: kf.index)


def save_dataset(root: Path | str, scenes: dict[str, list[Keyframe]]) -> None:
    for scene_id, keyframes in scenes.items():
        save_scene(root, scene_id, keyframes)


def load_dataset(
    root: Path | str, t: int, reverse: bool = False, mirror: bool = False
) -> list[SequenceSample]:
    """Load every scene directory under `root` (sorted) and window into samples."""
    root = Path(root)
    samples: list[SequenceSample] = []
    for scene_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        keyframes = load_scene(scene_dir)
        samples.extend(build_sequences(keyframes, t, scene_dir.name))
        if reverse:
            samples.extend(
                build_sequences(reverse_augment(keyframes), t, scene_dir.name + "_rev")
            )
    if mirror:
        samples.extend(mirror_augment(s) for s in list(samples))
    return samples
