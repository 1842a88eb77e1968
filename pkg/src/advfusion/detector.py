"""Late-slow-fusion temporal detector: per-frame 2D stems, a 3D fusion trunk,
temporal-depth reduction to a single slice, and a YOLO-style single-scale
grid head, plus its training loss and input-gradient access.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .anchors import AnchorSet, shape_iou
from .data import BoundingBox, SequenceSample

DOWNSAMPLE = 16  # four stride-2 stem stages

SUPPORTED_FRAMES = (1, 2, 3, 4)


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 4  # T
    num_classes: int = 2
    num_anchors: int = 8
    image_size: tuple[int, int] = (96, 160)  # (H, W)
    stem_widths: tuple[int, ...] = (12, 24, 32, 48)
    trunk_blocks: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.frames not in SUPPORTED_FRAMES:
            raise ValueError("temporal depth not reducible to 1")
        h, w = self.image_size
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ValueError(f"image size must be a multiple of {DOWNSAMPLE}")
        if len(self.stem_widths) != 4:
            raise ValueError("stem needs exactly four stage widths")
        if self.num_anchors < 1 or self.num_classes < 1:
            raise ValueError("need at least one anchor and one class")

    @property
    def grid_size(self) -> tuple[int, int]:
        return (self.image_size[0] // DOWNSAMPLE, self.image_size[1] // DOWNSAMPLE)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        doc = dict(doc)
        doc["image_size"] = tuple(doc["image_size"])
        doc["stem_widths"] = tuple(doc["stem_widths"])
        return cls(**doc)


def _norm(channels: int) -> nn.Module:
    return nn.GroupNorm(min(4, channels), channels)


class _Stem(nn.Module):
    """Four stride-2 conv stages taking one frame down to grid resolution."""

    def __init__(self, widths: tuple[int, ...]):
        super().__init__()
        layers: list[nn.Module] = []
        cin = 3
        for c in widths:
            layers += [nn.Conv2d(cin, c, 3, stride=2, padding=1), _norm(c), nn.SiLU()]
            cin = c
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def _reduction_schedule(t: int) -> list[int]:
    """Strides of the depth-2 temporal reduction convs taking depth t to 1."""
    strides, depth = [], t
    while depth > 1:
        if depth % 2 == 0:
            strides.append(2)
            depth //= 2
        else:
            strides.append(1)
            depth -= 1
    return strides


class TemporalDetector(nn.Module):
    """One separate stem per input frame, fused and reduced along time."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        t, cf = config.frames, config.stem_widths[-1]
        self.stems = nn.ModuleList(_Stem(config.stem_widths) for _ in range(t))
        trunk: list[nn.Module] = []
        kt = min(t, 3)
        for _ in range(config.trunk_blocks):
            trunk += [
                nn.Conv3d(cf, cf, (kt, 3, 3), padding=(kt // 2, 1, 1)),
                _norm(cf),
                nn.SiLU(),
            ]
        self.trunk = nn.Sequential(*trunk)
        reduce: list[nn.Module] = []
        for stride in _reduction_schedule(t):
            reduce += [
                nn.Conv3d(cf, cf, (2, 3, 3), stride=(stride, 1, 1), padding=(0, 1, 1)),
                _norm(cf),
                nn.SiLU(),
            ]
        self.reduce = nn.Sequential(*reduce)
        out = config.num_anchors * (5 + config.num_classes)
        self.head = nn.Conv2d(cf, out, 1)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, 3, H, W) in [0, 1] -> grid (B, S_y, S_x, K, 5 + C)."""
        cfg = self.config
        expect = (cfg.frames, 3, *cfg.image_size)
        if frames.dim() != 5 or tuple(frames.shape[1:]) != expect:
            raise ValueError(f"expected frames shaped (B, {expect}), got {tuple(frames.shape)}")
        feats = [self.stems[t](frames[:, t]) for t in range(cfg.frames)]
        x = torch.stack(feats, dim=2)  # (B, C, T, S_y, S_x)
        x = self.trunk(x)
        x = self.reduce(x).squeeze(2)
        x = self.head(x)  # (B, K*(5+C), S_y, S_x)
        b = x.shape[0]
        s_y, s_x = cfg.grid_size
        x = x.reshape(b, cfg.num_anchors, 5 + cfg.num_classes, s_y, s_x)
        return x.permute(0, 3, 4, 1, 2).contiguous()


def build_model(config: ModelConfig) -> TemporalDetector:
    """Construct with parameters deterministically initialized from config.seed."""
    torch.manual_seed(config.seed)
    return TemporalDetector(config)


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """(..., T, H, W, 3) numpy in [0,1] -> (..., T, 3, H, W) tensor.

    float64 input stays float64 (gradient checks); everything else -> float32.
    """
    dtype = np.float64 if frames.dtype == np.float64 else np.float32
    arr = np.ascontiguousarray(np.moveaxis(frames, -1, -3), dtype=dtype)
    return torch.from_numpy(arr)


def batch_tensor(samples: list[SequenceSample]) -> torch.Tensor:
    return frames_to_tensor(np.stack([s.frames for s in samples]))


def forward_batches(model: TemporalDetector, samples: list[SequenceSample],
                    batch_size: int = 32):
    """Yield one numpy grid per sample, evaluated in inference mode."""
    model.eval()
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            grids = model(batch_tensor(samples[i : i + batch_size]))
            for g in grids:
                yield g.numpy()


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def decode(grid: np.ndarray | torch.Tensor, anchors: AnchorSet,
           conf_threshold: float = 0.01) -> list[BoundingBox]:
    """Grid (S_y, S_x, K, 5+C) -> clipped detections above `conf_threshold`."""
    if isinstance(grid, torch.Tensor):
        grid = grid.detach().numpy()
    s_y, s_x, k, _ = grid.shape
    anchor_arr = anchors.as_array()
    if anchor_arr.shape[0] != k:
        raise ValueError("anchor count does not match grid")

    txy = _sigmoid(grid[..., 0:2])
    sizes = anchor_arr[None, None, :, :] * np.exp(grid[..., 2:4])
    obj = _sigmoid(grid[..., 4])
    logits = grid[..., 5:]
    logits = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=-1, keepdims=True)
    class_id = probs.argmax(axis=-1)
    conf = obj * probs.max(axis=-1)

    detections = []
    for i, j, a in zip(*np.nonzero(conf >= conf_threshold)):
        box = BoundingBox(
            cx=float((j + txy[i, j, a, 0]) / s_x),
            cy=float((i + txy[i, j, a, 1]) / s_y),
            w=float(sizes[i, j, a, 0]),
            h=float(sizes[i, j, a, 1]),
            class_id=int(class_id[i, j, a]),
            confidence=float(conf[i, j, a]),
        )
        detections.append(box.clipped())
    return detections


def assign_anchors(labels, anchors: AnchorSet, grid_size: tuple[int, int]):
    """(cell_y, cell_x, anchor) per label: best shape-IoU anchor, falling back
    to the next-best free anchor when an earlier label already claimed the
    slot; a label whose cell has no free anchor left is dropped.
    Returns the kept labels and their slots."""
    s_y, s_x = grid_size
    anchor_arr = anchors.as_array()
    used = set()
    slots, kept = [], []
    for box in labels:
        j = min(int(box.cx * s_x), s_x - 1)
        i = min(int(box.cy * s_y), s_y - 1)
        ious = np.array([shape_iou((box.w, box.h), tuple(a)) for a in anchor_arr])
        for a in np.argsort(-ious, kind="stable"):
            if (i, j, int(a)) not in used:
                used.add((i, j, int(a)))
                slots.append((i, j, int(a)))
                kept.append(box)
                break
    return kept, slots


@dataclass(frozen=True)
class LossWeights:
    # noobj below the YOLO-conventional 0.5: with K=8 anchors on a 6x10 grid
    # the ~470 negatives per image drown the few positives otherwise
    coord: float = 5.0
    obj: float = 1.0
    noobj: float = 0.1
    cls: float = 1.0


def build_targets(labels_batch, anchors: AnchorSet, config: ModelConfig):
    """Target tensors for the loss: responsibility mask, coords, classes."""
    s_y, s_x = config.grid_size
    b, k = len(labels_batch), config.num_anchors
    mask = torch.zeros((b, s_y, s_x, k), dtype=torch.bool)
    tcoord = torch.zeros((b, s_y, s_x, k, 4))
    tclass = torch.zeros((b, s_y, s_x, k), dtype=torch.long)
    anchor_arr = anchors.as_array()
    for n, labels in enumerate(labels_batch):
        kept, slots = assign_anchors(labels, anchors, config.grid_size)
        for box, (i, j, a) in zip(kept, slots):
            mask[n, i, j, a] = True
            tcoord[n, i, j, a, 0] = box.cx * s_x - j
            tcoord[n, i, j, a, 1] = box.cy * s_y - i
            tcoord[n, i, j, a, 2] = float(np.log(box.w / anchor_arr[a, 0]))
            tcoord[n, i, j, a, 3] = float(np.log(box.h / anchor_arr[a, 1]))
            tclass[n, i, j, a] = box.class_id
    return mask, tcoord, tclass


def detection_loss(
    grid: torch.Tensor,
    labels_batch,
    anchors: AnchorSet,
    config: ModelConfig | None = None,
    weights: LossWeights | None = None,
) -> torch.Tensor:
    """YOLO-style composite loss, summed over the grid, averaged over the batch.

    Squared error on sigmoid(tx), sigmoid(ty), tw, th and on objectness
    (target 1 on responsible anchors, 0 elsewhere); cross-entropy on the
    class logits of responsible anchors. With no labels this reduces to the
    pure no-object objectness term.
    """
    if grid.dim() == 4:
        grid = grid.unsqueeze(0)
        labels_batch = [labels_batch]
    weights = weights or LossWeights()
    b, s_y, s_x, k, ch = grid.shape
    if config is None:
        config = ModelConfig(
            num_classes=ch - 5,
            num_anchors=k,
            image_size=(s_y * DOWNSAMPLE, s_x * DOWNSAMPLE),
        )
    mask, tcoord, tclass = build_targets(labels_batch, anchors, config)

    pred_xy = torch.sigmoid(grid[..., 0:2])
    pred_wh = grid[..., 2:4]
    obj = torch.sigmoid(grid[..., 4])

    coord = ((pred_xy - tcoord[..., 0:2]) ** 2 + (pred_wh - tcoord[..., 2:4]) ** 2).sum(-1)
    coord_loss = (coord * mask).sum()
    obj_loss = (((obj - 1.0) ** 2) * mask).sum()
    noobj_loss = ((obj**2) * ~mask).sum()
    if mask.any():
        cls_loss = nn.functional.cross_entropy(
            grid[..., 5:][mask], tclass[mask], reduction="sum"
        )
    else:
        cls_loss = grid.new_zeros(())

    total = (
        weights.coord * coord_loss
        + weights.obj * obj_loss
        + weights.noobj * noobj_loss
        + weights.cls * cls_loss
    )
    return total / b


def encode_labels(labels, anchors: AnchorSet, config: ModelConfig,
                  logit: float = 12.0) -> np.ndarray:
    """Grid that decodes back to `labels` with near-saturated confidence."""
    s_y, s_x = config.grid_size
    grid = np.zeros((s_y, s_x, config.num_anchors, 5 + config.num_classes))
    grid[..., 4] = -logit
    anchor_arr = anchors.as_array()
    kept, slots = assign_anchors(labels, anchors, config.grid_size)
    for box, (i, j, a) in zip(kept, slots):
        px = np.clip(box.cx * s_x - j, 1e-6, 1 - 1e-6)
        py = np.clip(box.cy * s_y - i, 1e-6, 1 - 1e-6)
        grid[i, j, a, 0] = np.log(px / (1 - px))
        grid[i, j, a, 1] = np.log(py / (1 - py))
        grid[i, j, a, 2] = np.log(box.w / anchor_arr[a, 0])
        grid[i, j, a, 3] = np.log(box.h / anchor_arr[a, 1])
        grid[i, j, a, 4] = logit
        grid[i, j, a, 5:] = -logit
        grid[i, j, a, 5 + box.class_id] = logit
    return grid.astype(np.float32)


def input_gradient(
    model: TemporalDetector,
    sample: SequenceSample,
    anchors: AnchorSet,
    loss_kind: str = "train_loss",
    frame_mask=None,
    weights: LossWeights | None = None,
) -> np.ndarray:
    """Exact gradient of the chosen scalar loss w.r.t. every input pixel.

    `loss_kind` is "train_loss" (uses the sample labels) or "empty_label".
    With `frame_mask`, frames outside the mask are detached from the loss
    path and receive an exactly zero gradient.
    """
    if loss_kind not in ("train_loss", "empty_label"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    model.eval()
    dtype = next(model.parameters()).dtype
    frames = frames_to_tensor(sample.frames[None]).to(dtype).requires_grad_(True)
    x = frames
    if frame_mask is not None:
        m = torch.as_tensor(np.asarray(frame_mask, dtype=np.float32)).view(1, -1, 1, 1, 1)
        x = frames * m + frames.detach() * (1.0 - m)
    labels = sample.labels if loss_kind == "train_loss" else ()
    loss = detection_loss(model(x), [labels], anchors, model.config, weights)
    (grad,) = torch.autograd.grad(loss, frames)
    if grad is None:
        raise RuntimeError("loss is not differentiable w.r.t. the input")
    return np.moveaxis(grad[0].numpy(), 1, -1)


def param_checksum(model: nn.Module) -> str:
    """SHA-256 over all parameters and buffers, for freeze verification."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().numpy().tobytes())
    return digest.hexdigest()


def freeze_model(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def is_frozen(model: nn.Module) -> bool:
    return all(not p.requires_grad for p in model.parameters())


def run_training(
    model: TemporalDetector,
    samples: list[SequenceSample],
    anchors: AnchorSet,
    epochs: int,
    seed: int = 0,
    batch_size: int = 16,
    lr: float = 1e-3,
    weights: LossWeights | None = None,
    weight_decay: float = 0.0,
    cosine_lr: bool = False,
    batch_transform=None,
    log_fn=None,
) -> dict:
    """Shared Adam training loop over sequence samples.

    `batch_transform(frames, labels, epoch)` may replace the input batch
    tensor (adversarial training hooks in here); it must not touch model
    parameters. Returns a history dict with per-epoch mean training loss.
    """
    if epochs > 0 and not samples:
        raise ValueError("empty training set")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    scheduler = (
        torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(epochs, 1))
        if cosine_lr
        else None
    )
    history: dict = {"train_loss": []}
    model.train()
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(samples), batch_size):
            idx = order[start : start + batch_size]
            batch = [samples[int(i)] for i in idx]
            frames = batch_tensor(batch)
            labels = [s.labels for s in batch]
            if batch_transform is not None:
                frames = batch_transform(frames, labels, epoch)
            opt.zero_grad()
            loss = detection_loss(model(frames), labels, anchors, model.config, weights)
            if not torch.isfinite(loss):
                raise RuntimeError(f"training diverged (non-finite loss) at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        if scheduler is not None:
            scheduler.step()
        history["train_loss"].append(float(np.mean(losses)))
        if log_fn:
            log_fn(f"epoch {epoch + 1}/{epochs} loss {history['train_loss'][-1]:.4f}")
    model.eval()
    return history


def train_baseline(
    model: TemporalDetector,
    train_set: list[SequenceSample],
    anchors: AnchorSet,
    epochs: int,
    seed: int = 0,
    batch_size: int = 16,
    lr: float = 1e-3,
    weights: LossWeights | None = None,
    weight_decay: float = 0.0,
    cosine_lr: bool = False,
    log_fn=None,
) -> tuple[TemporalDetector, dict]:
    """Standard training; epochs=0 returns the model untouched."""
    history = run_training(
        model, train_set, anchors, epochs,
        seed=seed, batch_size=batch_size, lr=lr, weights=weights,
        weight_decay=weight_decay, cosine_lr=cosine_lr, log_fn=log_fn,
    )
    return model, history


def save_checkpoint(path: Path | str, model: TemporalDetector, meta: dict | None = None) -> None:
    """Weights at `path`, JSON sidecar (config + metadata) at `path + '.json'`."""
    path = Path(path)
    torch.save(model.state_dict(), path)
    doc = {"config": model.config.to_dict()}
    doc.update(meta or {})
    Path(str(path) + ".json").write_text(json.dumps(doc, indent=1))


def load_checkpoint(path: Path | str) -> tuple[TemporalDetector, dict]:
    path = Path(path)
    doc = json.loads(Path(str(path) + ".json").read_text())
    config = ModelConfig.from_dict(doc["config"])
    model = build_model(config)
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model, doc
