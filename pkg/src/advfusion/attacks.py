"""Universal and per-instance adversarial perturbations.

Two kinds: full-frame noise bounded in an L-inf ball, and an unconstrained
patch overwriting a rectangle. Both are trained with PGD-style loops that
keep raw (unsigned) gradients and an Adam update, project after every step,
and may be restricted to a subset of the T input frames via a frame mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .anchors import AnchorSet
from .data import SequenceSample
from .detector import (
    TemporalDetector,
    batch_tensor,
    detection_loss,
    is_frozen,
    param_checksum,
)
from .evaluation import EvalConfig, EvalResult, evaluate_map

NOISE_LR = 1e-3
PATCH_LR = 1e-2


@dataclass(eq=False)
class Perturbation:
    """A universal or per-instance adversarial artifact.

    `values` is float32 in image layout: noise (T, H, W, 3) (or (1, H, W, 3)
    when one slice is shared across frames), patch (p, p, 3). `frame_mask`
    says which of the T frames the perturbation touches; None means all.
    """

    kind: str  # "noise" | "patch"
    values: np.ndarray
    eps: float | None = None
    patch_pos: tuple[int, int] | None = None
    frame_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def resolved_mask(self, t: int) -> np.ndarray:
        if self.frame_mask is None:
            return np.ones(t, dtype=bool)
        mask = np.asarray(self.frame_mask, dtype=bool)
        if mask.shape != (t,):
            raise ValueError(f"frame mask length {mask.size} != T={t}")
        return mask


@dataclass(frozen=True)
class AttackConfig:
    """Settings of one attack run.

    `epochs` counts passes over the attack set for universal attacks and
    raw optimization steps for per-instance attacks (paper-style defaults:
    100 and 1000). `lr` of None picks the kind default (noise 1e-3,
    patch 1e-2).
    """

    kind: str = "noise"
    objective: str = "targeted_empty"  # or "untargeted_ascent"
    eps: float = 10 / 255
    patch_size: int = 12
    patch_pos: tuple[int, int] | None = None
    frame_mask: tuple[bool, ...] | None = None
    share_across_frames: bool = False
    epochs: int = 100
    lr: float | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("noise", "patch"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.objective not in ("targeted_empty", "untargeted_ascent"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.kind == "noise" and self.eps <= 0:
            raise ValueError("eps must be > 0 for noise attacks")
        if self.kind == "patch" and self.patch_size < 1:
            raise ValueError("patch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @property
    def step_size(self) -> float:
        if self.lr is not None:
            return self.lr
        return NOISE_LR if self.kind == "noise" else PATCH_LR


def init_noise(shape: tuple[int, ...], eps: float, seed: int) -> Perturbation:
    """Xavier-uniform init with both fans taken as one frame's pixel count,
    projected into the eps-ball."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    t, h, w, c = shape
    fan = h * w * c
    bound = float(np.sqrt(6.0 / (fan + fan)))
    rng = np.random.default_rng(seed)
    values = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    values = np.clip(values, -eps, eps)
    return Perturbation(kind="noise", values=values, eps=float(eps))


def init_patch(size: int, seed: int) -> Perturbation:
    if size < 1:
        raise ValueError("patch size must be >= 1")
    rng = np.random.default_rng(seed)
    values = rng.uniform(0.0, 1.0, size=(size, size, 3)).astype(np.float32)
    return Perturbation(kind="patch", values=values)


def project_linf(perturbation: Perturbation, eps: float) -> Perturbation:
    """Clamp noise values to [-eps, eps]; idempotent."""
    if perturbation.kind != "noise":
        raise ValueError("projection applies to noise")
    return replace(
        perturbation, values=np.clip(perturbation.values, -eps, eps), eps=float(eps)
    )


def apply_noise(sample: SequenceSample, perturbation: Perturbation) -> SequenceSample:
    """clamp(frame + delta, 0, 1) on masked frames; others stay bit-identical."""
    if perturbation.kind != "noise":
        raise ValueError("expected a noise perturbation")
    t = sample.frames.shape[0]
    values = perturbation.values
    if values.shape[1:] != sample.frames.shape[1:]:
        raise ValueError(
            f"noise shape {values.shape} does not match frames {sample.frames.shape}"
        )
    if values.shape[0] not in (1, t):
        raise ValueError(f"noise has {values.shape[0]} slices for T={t}")
    mask = perturbation.resolved_mask(t)
    frames = sample.frames.copy()
    for i in np.nonzero(mask)[0]:
        delta = values[0] if values.shape[0] == 1 else values[i]
        frames[i] = np.clip(frames[i] + delta, 0.0, 1.0)
    return replace(sample, frames=frames)


def apply_patch(sample: SequenceSample, perturbation: Perturbation) -> SequenceSample:
    """Overwrite the patch rectangle on masked frames; everything else untouched."""
    if perturbation.kind != "patch":
        raise ValueError("expected a patch perturbation")
    if perturbation.patch_pos is None:
        raise ValueError("patch has no position")
    t, h, w, _ = sample.frames.shape
    p = perturbation.values.shape[0]
    r, c = perturbation.patch_pos
    if r < 0 or c < 0 or r + p > h or c + p > w:
        raise ValueError(f"patch {p}x{p} at {(r, c)} out of bounds for {h}x{w}")
    mask = perturbation.resolved_mask(t)
    frames = sample.frames.copy()
    for i in np.nonzero(mask)[0]:
        frames[i, r : r + p, c : c + p, :] = perturbation.values
    return replace(sample, frames=frames)


def apply_perturbation(sample: SequenceSample, perturbation: Perturbation) -> SequenceSample:
    if perturbation.kind == "noise":
        return apply_noise(sample, perturbation)
    return apply_patch(sample, perturbation)


def _to_torch_values(values: np.ndarray) -> torch.Tensor:
    # image layout (..., H, W, 3) -> channel-first (..., 3, H, W)
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(values, -1, -3)))


def _to_numpy_values(values: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(values.detach().numpy(), -3, -1))


def _apply_noise_torch(frames: torch.Tensor, delta: torch.Tensor,
                       mask: torch.Tensor) -> torch.Tensor:
    # frames (B,T,3,H,W); delta (Tm,3,H,W) with Tm in {1, T}; mask (T,)
    return torch.clamp(frames + delta.unsqueeze(0) * mask.view(1, -1, 1, 1, 1), 0.0, 1.0)


def _apply_patch_torch(frames: torch.Tensor, patch: torch.Tensor,
                       pos: tuple[int, int], mask: np.ndarray) -> torch.Tensor:
    out = frames.clone()
    p = patch.shape[-1]
    r, c = pos
    for t in np.nonzero(mask)[0]:
        out[:, int(t), :, r : r + p, c : c + p] = patch
    return out


def _resolve_patch_pos(config: AttackConfig, image_size: tuple[int, int]) -> tuple[int, int]:
    h, w = image_size
    p = config.patch_size
    pos = config.patch_pos if config.patch_pos is not None else ((h - p) // 2, (w - p) // 2)
    if pos[0] < 0 or pos[1] < 0 or pos[0] + p > h or pos[1] + p > w:
        raise ValueError(f"patch {p}x{p} at {pos} out of bounds for {h}x{w}")
    return (int(pos[0]), int(pos[1]))


def _init_for_model(model: TemporalDetector, config: AttackConfig) -> Perturbation:
    t = model.config.frames
    h, w = model.config.image_size
    mask = np.ones(t, dtype=bool) if config.frame_mask is None else np.asarray(
        config.frame_mask, dtype=bool
    )
    if mask.shape != (t,):
        raise ValueError(f"frame mask length {mask.size} != T={t}")
    if config.kind == "noise":
        slices = 1 if config.share_across_frames else t
        pert = init_noise((slices, h, w, 3), config.eps, config.seed)
    else:
        pert = init_patch(config.patch_size, config.seed)
        pert = replace(pert, patch_pos=_resolve_patch_pos(config, (h, w)))
    return replace(pert, frame_mask=mask)


def universal_attack(
    model: TemporalDetector,
    dataset: list[SequenceSample],
    config: AttackConfig,
    anchors: AnchorSet,
    step_callback=None,
    log_fn=None,
) -> tuple[Perturbation, dict]:
    """Optimize one perturbation against a frozen model over a whole dataset.

    Per step: build the attacked batch, take the raw gradient of the attack
    objective w.r.t. the perturbation only, Adam-update, then project (noise
    to the eps-ball, patch to [0, 1]). `step_callback(step, values)` fires
    after every projection with the current numpy values; model weights are
    verified unchanged. Returns the perturbation and a per-epoch loss history.
    """
    if not is_frozen(model):
        raise ValueError("model must be frozen (freeze_model) before attacking")
    pert = _init_for_model(model, config)
    meta = {
        "seed": config.seed,
        "objective": config.objective,
        "epochs": config.epochs,
        "kind": config.kind,
    }
    pert.meta.update(meta)
    if config.epochs == 0:
        return pert, {"attack_loss": []}
    if not pert.resolved_mask(model.config.frames).any():
        raise ValueError("frame mask selects no frames; nothing to train")
    if not dataset:
        raise ValueError("empty attack dataset")

    checksum = param_checksum(model)
    delta = _to_torch_values(pert.values).clone().requires_grad_(True)
    opt = torch.optim.Adam([delta], lr=config.step_size, betas=config.betas)
    mask_np = pert.resolved_mask(model.config.frames)
    mask_t = torch.from_numpy(mask_np.astype(np.float32))
    rng = np.random.default_rng(config.seed)
    targeted = config.objective == "targeted_empty"
    history: list[float] = []
    step = 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(dataset), config.batch_size):
            batch = [dataset[int(i)] for i in order[start : start + config.batch_size]]
            frames = batch_tensor(batch)
            if config.kind == "noise":
                attacked = _apply_noise_torch(frames, delta, mask_t)
            else:
                attacked = _apply_patch_torch(frames, delta, pert.patch_pos, mask_np)
            grid = model(attacked)
            if targeted:
                loss = detection_loss(grid, [() for _ in batch], anchors, model.config)
            else:
                loss = -detection_loss(grid, [s.labels for s in batch], anchors, model.config)
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                if config.kind == "noise":
                    delta.clamp_(-config.eps, config.eps)
                else:
                    delta.clamp_(0.0, 1.0)
            step += 1
            if step_callback is not None:
                step_callback(step, _to_numpy_values(delta))
            losses.append(float(loss.detach()))
        history.append(float(np.mean(losses)))
        if log_fn:
            log_fn(f"attack epoch {epoch + 1}/{config.epochs} loss {history[-1]:.4f}")

    if param_checksum(model) != checksum:
        raise RuntimeError("attack modified model parameters")
    pert.values = _to_numpy_values(delta)
    return pert, {"attack_loss": history}


def per_instance_attack(
    model: TemporalDetector,
    sample: SequenceSample,
    config: AttackConfig,
    anchors: AnchorSet,
    step_callback=None,
) -> Perturbation:
    """Same loop as the universal attack, specialized to one sample;
    `config.epochs` counts raw steps (paper-style default 1000)."""
    pert, _ = universal_attack(
        model, [sample], config, anchors, step_callback=step_callback
    )
    return pert


def partial_sequence_eval(
    model: TemporalDetector,
    samples: list[SequenceSample],
    perturbation: Perturbation,
    frame_mask,
    anchors: AnchorSet,
    config: EvalConfig | None = None,
) -> EvalResult:
    """mAP with the perturbation applied only on `frame_mask` frames."""
    mask = np.asarray(frame_mask, dtype=bool)
    pert = replace(perturbation, frame_mask=mask)
    attacked = [apply_perturbation(s, pert) for s in samples]
    return evaluate_map(model, attacked, anchors, config)


def save_perturbation(path: Path | str, perturbation: Perturbation) -> None:
    """Raw little-endian float32 values plus a JSON sidecar at `path + '.json'`."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(perturbation.values, dtype="<f4").tobytes())
    mask = perturbation.frame_mask
    doc = {
        "kind": perturbation.kind,
        "shape": list(perturbation.values.shape),
        "eps": perturbation.eps,
        "patch_pos": list(perturbation.patch_pos) if perturbation.patch_pos else None,
        "frame_mask": [bool(m) for m in mask] if mask is not None else None,
    }
    doc.update(perturbation.meta)
    Path(str(path) + ".json").write_text(json.dumps(doc, indent=1))


def load_perturbation(path: Path | str) -> Perturbation:
    path = Path(path)
    doc = json.loads(Path(str(path) + ".json").read_text())
    shape = tuple(doc["shape"])
    values = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(shape).copy()
    mask = doc.get("frame_mask")
    meta = {
        k: v
        for k, v in doc.items()
        if k not in ("kind", "shape", "eps", "patch_pos", "frame_mask")
    }
    return Perturbation(
        kind=doc["kind"],
        values=values.astype(np.float32),
        eps=doc.get("eps"),
        patch_pos=tuple(doc["patch_pos"]) if doc.get("patch_pos") else None,
        frame_mask=np.asarray(mask, dtype=bool) if mask is not None else None,
        meta=meta,
    )
