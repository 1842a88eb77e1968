"""Detector: architecture contracts, decode/encode, loss closed forms,
gradients against central finite differences, training loop behavior."""

import numpy as np
import pytest
import torch

from advfusion.anchors import AnchorSet, iou
from advfusion.data import BoundingBox, make_dataset
from advfusion.detector import (
    LossWeights,
    ModelConfig,
    _reduction_schedule,
    build_model,
    build_targets,
    decode,
    detection_loss,
    encode_labels,
    frames_to_tensor,
    input_gradient,
    load_checkpoint,
    param_checksum,
    save_checkpoint,
    train_baseline,
)
from conftest import TINY_MODEL, TINY_SCENE

ANCHORS4 = AnchorSet(((0.1, 0.25), (0.2, 0.12), (0.35, 0.2), (0.5, 0.45)))


def gt(cx, cy, w, h, cls=0):
    return BoundingBox(cx=cx, cy=cy, w=w, h=h, class_id=cls)


def rand_frames(cfg, batch=1, seed=0):
    rng = np.random.default_rng(seed)
    h, w = cfg.image_size
    return rng.random((batch, cfg.frames, h, w, 3)).astype(np.float32)


# ------------------------------------------------------------- architecture


def test_reduction_schedule():
    assert _reduction_schedule(4) == [2, 2]  # two halvings
    assert _reduction_schedule(2) == [2]
    assert _reduction_schedule(3) == [1, 2]
    assert _reduction_schedule(1) == []


def test_unsupported_temporal_depth():
    with pytest.raises(ValueError, match="temporal depth not reducible"):
        ModelConfig(frames=5)


def test_build_deterministic_per_seed():
    a = build_model(TINY_MODEL)
    b = build_model(TINY_MODEL)
    assert param_checksum(a) == param_checksum(b)
    c = build_model(ModelConfig(**{**TINY_MODEL.to_dict(), "seed": 1}))
    assert param_checksum(c) != param_checksum(a)


@pytest.mark.parametrize("frames", [1, 2, 3, 4])
def test_forward_shapes_all_horizons(frames):
    cfg = ModelConfig(
        frames=frames, num_classes=2, num_anchors=4, image_size=(32, 48),
        stem_widths=(4, 8, 12, 16), trunk_blocks=1,
    )
    model = build_model(cfg)
    out = model(frames_to_tensor(rand_frames(cfg, batch=2)))
    assert out.shape == (2, 2, 3, 4, 7)
    assert torch.isfinite(out).all()


def test_forward_zero_input_finite():
    model = build_model(TINY_MODEL)
    zeros = torch.zeros(1, 4, 3, 32, 48)
    assert torch.isfinite(model(zeros)).all()


def test_forward_shape_mismatch_rejected():
    model = build_model(TINY_MODEL)
    with pytest.raises(ValueError, match="expected frames"):
        model(torch.zeros(1, 3, 3, 32, 48))


def test_batched_forward_matches_per_sample():
    model = build_model(TINY_MODEL).eval()
    frames = rand_frames(TINY_MODEL, batch=4, seed=3)
    with torch.no_grad():
        batched = model(frames_to_tensor(frames))
        single = torch.cat([model(frames_to_tensor(frames[i : i + 1])) for i in range(4)])
    assert torch.allclose(batched, single, atol=1e-5)


def test_frame_permutation_changes_output(tiny_model):
    frames = rand_frames(TINY_MODEL, batch=1, seed=5)
    permuted = frames[:, [3, 2, 1, 0]]
    with torch.no_grad():
        a = tiny_model(frames_to_tensor(frames))
        b = tiny_model(frames_to_tensor(permuted))
    assert not torch.allclose(a, b)


def test_forward_deterministic(tiny_model):
    frames = frames_to_tensor(rand_frames(TINY_MODEL, seed=6))
    with torch.no_grad():
        a = tiny_model(frames)
        b = tiny_model(frames)
    assert torch.equal(a, b)


# ------------------------------------------------------------------ decode


def test_decode_zero_grid():
    cfg = TINY_MODEL
    s_y, s_x = cfg.grid_size
    grid = np.zeros((s_y, s_x, 4, 7), dtype=np.float32)
    dets = decode(grid, ANCHORS4, conf_threshold=0.01)
    assert len(dets) == s_y * s_x * 4
    anchor_arr = ANCHORS4.as_array()
    for d in dets:
        assert d.confidence == pytest.approx(0.5 * 0.5, abs=1e-6)  # sigma(0) * 1/C
    # one specific cell: center of cell (1, 2), anchor dims preserved
    cell = [d for d in dets if abs(d.cx - 2.5 / s_x) < 1e-9 and abs(d.cy - 1.5 / s_y) < 1e-9]
    assert any(
        abs(d.w - anchor_arr[k, 0]) < 1e-9 and abs(d.h - anchor_arr[k, 1]) < 1e-9
        for k in range(4)
        for d in cell
    )


def test_decode_threshold_one_empty():
    grid = np.random.default_rng(0).normal(size=(2, 3, 4, 7)).astype(np.float32)
    assert decode(grid, ANCHORS4, conf_threshold=1.0) == []


def test_decode_double_anchor_box():
    # tx=ty=0, tw=th=ln 2 in one cell: box at cell center, twice the anchor
    s_y, s_x = 2, 3
    grid = np.full((s_y, s_x, 4, 7), -20.0, dtype=np.float32)
    grid[..., 0:4] = 0.0
    grid[1, 2, 1, 2:4] = np.log(2.0)
    grid[1, 2, 1, 4] = 5.0
    grid[1, 2, 1, 5] = 5.0
    dets = decode(grid, ANCHORS4, conf_threshold=0.9)
    assert len(dets) == 1
    d = dets[0]
    aw, ah = ANCHORS4.shapes[1]
    assert d.cx == pytest.approx(2.5 / s_x, abs=1e-6)
    assert d.cy == pytest.approx(1.5 / s_y, abs=1e-6)
    assert d.w == pytest.approx(2 * aw, abs=1e-6)
    assert d.h == pytest.approx(2 * ah, abs=1e-6)
    assert d.class_id == 0


def test_decode_encode_roundtrip():
    labels = (
        gt(0.31, 0.42, 0.18, 0.12, cls=0),
        gt(0.72, 0.65, 0.08, 0.27, cls=1),
        gt(0.15, 0.80, 0.30, 0.18, cls=0),
    )
    grid = encode_labels(labels, ANCHORS4, TINY_MODEL)
    dets = decode(grid, ANCHORS4, conf_threshold=0.5)
    assert len(dets) == len(labels)
    for label in labels:
        best = max(iou(label, d) for d in dets)
        assert best > 0.99


# -------------------------------------------------------------------- loss


def test_loss_empty_labels_closed_form():
    s_y, s_x, k, c = 2, 3, 4, 2
    grid = torch.zeros((1, s_y, s_x, k, 5 + c))
    w = LossWeights()
    loss = detection_loss(grid, [()], ANCHORS4, weights=w)
    expected = w.noobj * s_y * s_x * k * 0.25  # sigma(0)^2 per empty anchor
    assert float(loss) == pytest.approx(expected, abs=1e-6)


def test_loss_doubling_noobj_weight_doubles_empty_loss():
    grid = torch.from_numpy(
        np.random.default_rng(1).normal(size=(1, 2, 3, 4, 7)).astype(np.float32)
    )
    base = detection_loss(grid, [()], ANCHORS4, weights=LossWeights(noobj=0.5))
    double = detection_loss(grid, [()], ANCHORS4, weights=LossWeights(noobj=1.0))
    assert float(double) == pytest.approx(2 * float(base), rel=1e-6)


def test_loss_perfect_encoding_near_zero():
    labels = (gt(0.31, 0.42, 0.18, 0.12, cls=0), gt(0.72, 0.65, 0.08, 0.27, cls=1))
    grid = torch.from_numpy(encode_labels(labels, ANCHORS4, TINY_MODEL, logit=14.0))
    loss = detection_loss(grid, labels, ANCHORS4, TINY_MODEL)
    assert 0.0 <= float(loss) < 1e-3


def test_loss_nonnegative_random_grids():
    rng = np.random.default_rng(2)
    for _ in range(10):
        grid = torch.from_numpy(rng.normal(size=(1, 2, 3, 4, 7)).astype(np.float32))
        labels = [(gt(0.4, 0.5, 0.2, 0.2),)]
        assert float(detection_loss(grid, labels, ANCHORS4)) >= 0.0


def test_build_targets_collision_falls_back_to_free_anchor():
    a = gt(0.41, 0.41, 0.2, 0.12, cls=0)
    b = gt(0.42, 0.42, 0.2, 0.12, cls=1)  # same cell, same best anchor
    mask, _, tclass = build_targets([(a, b)], ANCHORS4, TINY_MODEL)
    assert int(mask.sum()) == 2  # second label claims the next-best anchor
    assert sorted(int(c) for c in tclass[mask]) == [0, 1]


def test_build_targets_full_cell_drops_label():
    from advfusion.detector import assign_anchors

    boxes = tuple(gt(0.41, 0.41, 0.2, 0.12, cls=0) for _ in range(5))
    kept, slots = assign_anchors(boxes, ANCHORS4, TINY_MODEL.grid_size)
    assert len(kept) == 4  # only K anchors exist per cell
    assert len(set(slots)) == 4


# ---------------------------------------------------------------- gradients


def _fd_loss(model, frames_np, labels, anchors, kind):
    with torch.no_grad():
        t = frames_to_tensor(frames_np[None]).to(torch.float64)
        use = labels if kind == "train_loss" else ()
        return float(detection_loss(model(t), [use], anchors, model.config))


def test_input_gradient_matches_finite_differences(tiny_train, tiny_anchors):
    torch.manual_seed(0)
    model = build_model(TINY_MODEL).double().eval()
    sample = tiny_train[0]
    rng = np.random.default_rng(4)
    frames64 = sample.frames.astype(np.float64)
    h = 1e-5
    for kind in ("train_loss", "empty_label"):
        grad = input_gradient(model, sample, tiny_anchors, loss_kind=kind)
        assert grad.shape == sample.frames.shape
        checked = 0
        for _ in range(25):
            t = int(rng.integers(0, frames64.shape[0]))
            y = int(rng.integers(0, frames64.shape[1]))
            x = int(rng.integers(0, frames64.shape[2]))
            c = int(rng.integers(0, 3))
            plus = frames64.copy()
            plus[t, y, x, c] += h
            minus = frames64.copy()
            minus[t, y, x, c] -= h
            fd = (
                _fd_loss(model, plus, sample.labels, tiny_anchors, kind)
                - _fd_loss(model, minus, sample.labels, tiny_anchors, kind)
            ) / (2 * h)
            got = grad[t, y, x, c]
            assert got == pytest.approx(fd, rel=1e-3, abs=1e-6)
            checked += 1
        assert checked == 25


def test_input_gradient_zero_for_constant_head(tiny_anchors, tiny_train):
    model = build_model(TINY_MODEL)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    grad = input_gradient(model, tiny_train[0], tiny_anchors, loss_kind="empty_label")
    assert np.all(grad == 0.0)


def test_input_gradient_frame_mask_zeroing(tiny_anchors, tiny_train):
    model = build_model(TINY_MODEL)
    grad = input_gradient(
        model, tiny_train[0], tiny_anchors, loss_kind="empty_label",
        frame_mask=[False, False, True, True],
    )
    assert np.all(grad[0] == 0.0) and np.all(grad[1] == 0.0)
    assert np.any(grad[2] != 0.0) and np.any(grad[3] != 0.0)


def test_input_gradient_unknown_kind(tiny_anchors, tiny_train):
    model = build_model(TINY_MODEL)
    with pytest.raises(ValueError):
        input_gradient(model, tiny_train[0], tiny_anchors, loss_kind="nonsense")


# ---------------------------------------------------------------- training


def test_train_zero_epochs_leaves_model_unchanged(tiny_train, tiny_anchors):
    model = build_model(TINY_MODEL)
    before = param_checksum(model)
    model, history = train_baseline(model, tiny_train, tiny_anchors, epochs=0)
    assert param_checksum(model) == before
    assert history["train_loss"] == []


def test_train_loss_decreases(tiny_train, tiny_anchors):
    model = build_model(TINY_MODEL)
    _, history = train_baseline(model, tiny_train, tiny_anchors, epochs=8, seed=0)
    assert history["train_loss"][-1] < history["train_loss"][0]


def test_train_deterministic(tiny_train, tiny_anchors):
    runs = []
    for _ in range(2):
        model = build_model(TINY_MODEL)
        model, _ = train_baseline(model, tiny_train, tiny_anchors, epochs=2, seed=9)
        runs.append(param_checksum(model))
    assert runs[0] == runs[1]


def test_train_nan_aborts_with_epoch(tiny_train, tiny_anchors):
    model = build_model(TINY_MODEL)
    with torch.no_grad():
        model.head.weight[0, 0, 0, 0] = float("nan")
    with pytest.raises(RuntimeError, match="epoch 0"):
        train_baseline(model, tiny_train, tiny_anchors, epochs=1)


def test_checkpoint_roundtrip(tmp_path, tiny_model, tiny_val, tiny_anchors):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, tiny_model, {"seed": 0, "epochs": 8, "clean_map": 0.5})
    loaded, meta = load_checkpoint(path)
    assert meta["seed"] == 0 and meta["clean_map"] == 0.5
    assert meta["config"]["frames"] == 4
    assert param_checksum(loaded) == param_checksum(tiny_model)
    frames = frames_to_tensor(tiny_val[0].frames[None])
    with torch.no_grad():
        assert torch.equal(loaded(frames), tiny_model(frames))
