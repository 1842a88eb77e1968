"""Adversarial-training defenses: K-PGD, reused patch pool, and R-FGSM.

All three plug a batch transform into the standard training loop: the
transform builds an attacked batch (inner phase, model parameters untouched),
then the regular update runs on the attacked batch with true labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .anchors import AnchorSet
from .attacks import (
    NOISE_LR,
    PATCH_LR,
    Perturbation,
    _apply_noise_torch,
    _apply_patch_torch,
    _to_torch_values,
)
from .data import SequenceSample
from .detector import LossWeights, TemporalDetector, detection_loss, run_training


@dataclass(frozen=True)
class ATConfig:
    """Adversarial-training settings.

    `k` inner steps only apply to the kpgd strategy; `inner_lr` of None uses
    ten times the attack module's default step size for the perturbation
    kind, the "drastically increased" inner rate that makes a 5-step attack
    bite. `apply_prob` is the per-batch patch probability for reuse_patch.
    """

    strategy: str = "kpgd"  # kpgd | reuse_patch | rfgsm
    kind: str = "noise"  # inner perturbation kind for kpgd
    eps: float = 10 / 255
    patch_size: int = 12
    k: int = 5
    inner_lr: float | None = None
    apply_prob: float = 0.5
    epochs: int = 12
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in ("kpgd", "reuse_patch", "rfgsm"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.kind not in ("noise", "patch"):
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError("apply_prob must lie in [0, 1]")

    @property
    def inner_step_size(self) -> float:
        if self.inner_lr is not None:
            return self.inner_lr
        return 10.0 * (NOISE_LR if self.kind == "noise" else PATCH_LR)


def _xavier_noise(rng: np.random.Generator, h: int, w: int, eps: float) -> torch.Tensor:
    fan = h * w * 3
    bound = min(float(np.sqrt(6.0 / (fan + fan))), eps)
    vals = rng.uniform(-bound, bound, size=(1, 3, h, w)).astype(np.float32)
    return torch.from_numpy(vals)


def kpgd_attack_batch(
    model: TemporalDetector,
    frames: torch.Tensor,
    anchors: AnchorSet,
    config: ATConfig,
    rng: np.random.Generator,
    weights: LossWeights | None = None,
    trace: list | None = None,
) -> tuple[torch.Tensor, int]:
    """The K-PGD inner phase: k raw-gradient Adam steps on one perturbation
    shared by the whole batch (empty-label objective), projecting after each
    step. Model parameters receive no gradient. Returns the attacked batch
    and the number of inner gradient evaluations; `trace`, when given,
    collects (min, max) of the perturbation after every step.
    """
    t = model.config.frames
    h, w = model.config.image_size
    mask_np = np.ones(t, dtype=bool)
    mask_t = torch.ones(t)
    if config.kind == "noise":
        delta = _xavier_noise(rng, h, w, config.eps).requires_grad_(True)
        pos = None
    else:
        p = config.patch_size
        pos = ((h - p) // 2, (w - p) // 2)
        vals = rng.uniform(0.0, 1.0, size=(3, p, p)).astype(np.float32)
        delta = torch.from_numpy(vals).requires_grad_(True)
    opt = torch.optim.Adam([delta], lr=config.inner_step_size)
    empty = [() for _ in range(frames.shape[0])]
    evals = 0
    for _ in range(config.k):
        if config.kind == "noise":
            attacked = _apply_noise_torch(frames, delta, mask_t)
        else:
            attacked = _apply_patch_torch(frames, delta, pos, mask_np)
        loss = detection_loss(model(attacked), empty, anchors, model.config, weights)
        (grad,) = torch.autograd.grad(loss, delta)
        evals += 1
        opt.zero_grad()
        delta.grad = grad
        opt.step()
        with torch.no_grad():
            if config.kind == "noise":
                delta.clamp_(-config.eps, config.eps)
            else:
                delta.clamp_(0.0, 1.0)
        if trace is not None:
            with torch.no_grad():
                trace.append((float(delta.min()), float(delta.max())))
    final = delta.detach()
    if config.kind == "noise":
        return _apply_noise_torch(frames, final, mask_t), evals
    return _apply_patch_torch(frames, final, pos, mask_np), evals


def kpgd_adversarial_training(
    model: TemporalDetector,
    train_set: list[SequenceSample],
    anchors: AnchorSet,
    config: ATConfig,
    weights: LossWeights | None = None,
    log_fn=None,
) -> tuple[TemporalDetector, dict]:
    """K-PGD AT: per batch, k empty-label attack steps build one shared
    perturbation (a single adversarial example for the whole input batch),
    then one model update runs on the attacked batch with true labels.
    """
    rng_inner = np.random.default_rng(config.seed + 101)
    counters = {"inner_grad_evals": 0, "batches": 0}

    def transform(frames: torch.Tensor, labels, epoch: int) -> torch.Tensor:
        counters["batches"] += 1
        attacked, evals = kpgd_attack_batch(model, frames, anchors, config, rng_inner, weights)
        counters["inner_grad_evals"] += evals
        return attacked

    history = run_training(
        model, train_set, anchors, config.epochs,
        seed=config.seed, batch_size=config.batch_size, lr=config.lr,
        weights=weights, batch_transform=transform, log_fn=log_fn,
    )
    history.update(counters)
    return model, history


def reuse_patch_training(
    model: TemporalDetector,
    train_set: list[SequenceSample],
    anchors: AnchorSet,
    patch_pool: list[Perturbation],
    config: ATConfig,
    weights: LossWeights | None = None,
    log_fn=None,
) -> tuple[TemporalDetector, dict]:
    """AT with pre-generated patches: with probability `apply_prob`, a pool
    patch is stamped onto the batch before the standard update. No new
    patches are generated; with apply_prob=0 the trajectory is identical to
    standard training under the same seed.
    """
    if not patch_pool:
        raise ValueError("empty patch pool")
    for pert in patch_pool:
        if pert.kind != "patch" or pert.patch_pos is None:
            raise ValueError("pool must contain placed patch perturbations")
    t = model.config.frames
    rng_pool = np.random.default_rng(config.seed + 7919)
    counters = {"patched_batches": 0, "batches": 0}
    patches = [
        (_to_torch_values(p.values), p.patch_pos, p.resolved_mask(t)) for p in patch_pool
    ]

    def transform(frames: torch.Tensor, labels, epoch: int) -> torch.Tensor:
        counters["batches"] += 1
        if rng_pool.random() >= config.apply_prob:
            return frames
        counters["patched_batches"] += 1
        vals, pos, mask = patches[int(rng_pool.integers(len(patches)))]
        return _apply_patch_torch(frames, vals, pos, mask)

    history = run_training(
        model, train_set, anchors, config.epochs,
        seed=config.seed, batch_size=config.batch_size, lr=config.lr,
        weights=weights, batch_transform=transform, log_fn=log_fn,
    )
    history.update(counters)
    return model, history


def rfgsm_attack_batch(
    model: TemporalDetector,
    frames: torch.Tensor,
    anchors: AnchorSet,
    eps: float,
    alpha: float,
    rng: np.random.Generator,
    weights: LossWeights | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """One R-FGSM attack: random start in the eps-ball, a single signed step
    of size alpha toward the empty-label objective, then projection.

    Returns (attacked frames, init delta, stepped delta before projection).
    """
    init = rng.uniform(-eps, eps, size=tuple(frames.shape)).astype(np.float32)
    delta0 = torch.from_numpy(init).requires_grad_(True)
    attacked0 = torch.clamp(frames + delta0, 0.0, 1.0)
    empty = [() for _ in range(frames.shape[0])]
    loss = detection_loss(model(attacked0), empty, anchors, model.config, weights)
    (grad,) = torch.autograd.grad(loss, delta0)
    with torch.no_grad():
        stepped = delta0 - alpha * torch.sign(grad)
        delta1 = torch.clamp(stepped, -eps, eps)
        attacked = torch.clamp(frames + delta1, 0.0, 1.0)
    return attacked, delta0.detach(), stepped


def rfgsm_training(
    model: TemporalDetector,
    train_set: list[SequenceSample],
    anchors: AnchorSet,
    config: ATConfig,
    alpha: float | None = None,
    weights: LossWeights | None = None,
    log_fn=None,
) -> tuple[TemporalDetector, dict]:
    """R-FGSM AT with noise; alpha defaults to 1.25 * eps."""
    step = 1.25 * config.eps if alpha is None else alpha
    rng_noise = np.random.default_rng(config.seed + 4099)
    counters = {"batches": 0}

    def transform(frames: torch.Tensor, labels, epoch: int) -> torch.Tensor:
        counters["batches"] += 1
        attacked, _, _ = rfgsm_attack_batch(
            model, frames, anchors, config.eps, step, rng_noise, weights
        )
        return attacked

    history = run_training(
        model, train_set, anchors, config.epochs,
        seed=config.seed, batch_size=config.batch_size, lr=config.lr,
        weights=weights, batch_transform=transform, log_fn=log_fn,
    )
    history.update(counters)
    return model, history
