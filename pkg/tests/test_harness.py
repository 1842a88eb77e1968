"""Harness: spec round trips, visualization conventions, tiny end-to-end
table runs (bit-identical on rerun), ablation table structure, CLI smoke."""

import json
from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from advfusion.attacks import AttackConfig, Perturbation, init_noise, universal_attack
from advfusion.cli import main, parse_eps, parse_mask
from advfusion.data import SceneConfig
from advfusion.detector import ModelConfig
from advfusion.evaluation import EvalConfig
from advfusion.harness import (
    DEFAULT_PARTIAL_MASKS,
    ExperimentSpec,
    ablate_horizon,
    ablate_partial_sequence,
    ablate_patch,
    attack_subset,
    build_benchmark,
    default_patch_positions,
    detect_and_render,
    run_table_experiment,
    visualize_perturbation,
)
from conftest import TINY_MODEL, TINY_SCENE

EPS = 10 / 255

TINY_SPEC = ExperimentSpec(
    name="tiny",
    train_scenes=4,
    val_scenes=2,
    scene=TINY_SCENE,
    augment_reverse=False,
    model=TINY_MODEL,
    anchors_k=4,
    train_epochs=2,
    noise_eps=(EPS,),
    patch_size=5,
    attack_epochs=2,
    attack_samples=8,
    at_epochs=1,
    patch_pool_size=1,
)


# -------------------------------------------------------------------- spec


def test_spec_json_roundtrip(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(TINY_SPEC.to_dict()))
    loaded = ExperimentSpec.from_json(path)
    assert loaded == TINY_SPEC


def test_parse_helpers():
    assert parse_eps("10/255") == pytest.approx(10 / 255)
    assert parse_eps("0.05") == pytest.approx(0.05)
    assert parse_mask("1011") == (True, False, True, True)
    assert parse_mask(None) is None


def test_default_partial_masks_cover_table():
    assert len(DEFAULT_PARTIAL_MASKS) == 10
    assert (0, 0, 0, 0) in DEFAULT_PARTIAL_MASKS
    assert (1, 1, 1, 1) in DEFAULT_PARTIAL_MASKS
    for chain in ((0, 0, 0, 1), (0, 0, 1, 1), (0, 1, 1, 1)):
        assert chain in DEFAULT_PARTIAL_MASKS


def test_default_patch_positions_grid():
    positions = default_patch_positions((96, 160), 12)
    assert len(positions) == 9
    assert ((96 - 12) // 2, (160 - 12) // 2) in positions
    assert all(0 <= r <= 84 and 0 <= c <= 148 for r, c in positions)


# ----------------------------------------------------------- visualization


def test_visualize_zero_noise_is_mid_gray(tmp_path):
    pert = Perturbation(kind="noise", values=np.zeros((1, 8, 8, 3), np.float32), eps=EPS)
    (path,) = visualize_perturbation(pert, tmp_path / "zero.png")
    img = np.asarray(Image.open(path))
    assert np.all(img == 128)  # round-half-even sends 127.5 up


def test_visualize_noise_extremes(tmp_path):
    values = np.zeros((1, 4, 4, 3), np.float32)
    values[0, 0, 0] = EPS
    values[0, 1, 1] = -EPS
    pert = Perturbation(kind="noise", values=values, eps=EPS)
    (path,) = visualize_perturbation(pert, tmp_path / "ext.png")
    img = np.asarray(Image.open(path))
    assert np.all(img[0, 0] == 255)
    assert np.all(img[1, 1] == 0)


def test_visualize_multi_frame_noise_one_file_per_slice(tmp_path):
    pert = init_noise((4, 8, 8, 3), EPS, seed=0)
    paths = visualize_perturbation(pert, tmp_path / "noise.png")
    assert [p.name for p in paths] == [f"noise_f{t}.png" for t in range(4)]
    assert all(p.exists() for p in paths)


def test_visualize_all_ones_patch_is_white(tmp_path):
    pert = Perturbation(kind="patch", values=np.ones((5, 5, 3), np.float32))
    (path,) = visualize_perturbation(pert, tmp_path / "patch.png")
    assert np.all(np.asarray(Image.open(path)) == 255)


def test_detect_and_render_writes_annotated_frame(tmp_path, tiny_model, tiny_val, tiny_anchors):
    out = tmp_path / "render.png"
    detect_and_render(tiny_model, tiny_val[0], tiny_anchors, out, conf_threshold=0.2)
    assert out.exists()
    img = np.asarray(Image.open(out))
    assert img.shape == (32 * 3, 48 * 3, 3)


def test_detect_and_render_no_detections(tmp_path, tiny_model, tiny_val, tiny_anchors):
    out = tmp_path / "empty.png"
    dets = detect_and_render(tiny_model, tiny_val[0], tiny_anchors, out, conf_threshold=1.0)
    assert dets == [] and out.exists()


# ------------------------------------------------------------ experiments


@pytest.fixture(scope="module")
def tiny_table(tmp_path_factory):
    out = tmp_path_factory.mktemp("table_run")
    doc = run_table_experiment(replace(TINY_SPEC, defenses=("rfgsm",)), out)
    return doc, out


def test_table_structure(tiny_table):
    doc, out = tiny_table
    assert doc["rows"] == ["baseline", "rfgsm"]
    assert doc["columns"] == ["no_attack", "patch", "noise_10_255"]
    for row in doc["rows"]:
        for col in doc["columns"]:
            assert 0.0 <= doc["cells"][row][col] <= 1.0
    assert (out / "table.csv").exists()
    assert (out / "baseline.ckpt").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"]
    assert any(s["stage"] == "train-baseline" for s in manifest["stages"])


def test_table_rerun_bit_identical(tiny_table, tmp_path):
    doc, _ = tiny_table
    again = run_table_experiment(replace(TINY_SPEC, defenses=("rfgsm",)), tmp_path / "again")
    assert again["cells"] == doc["cells"]


def test_ablate_horizon_rows(tmp_path):
    spec = replace(TINY_SPEC, train_epochs=1)
    doc = ablate_horizon(spec, tmp_path / "hz", lengths=(1, 2), seeds=(0,))
    assert [r["frames"] for r in doc["results"]] == [1, 2]
    assert all(0.0 <= r["clean_map"] <= 1.0 for r in doc["results"])
    assert (tmp_path / "hz" / "horizon.csv").exists()


def test_ablate_partial_structure(tmp_path, tiny_model, tiny_val, tiny_anchors, tiny_train):
    cfg = AttackConfig(kind="noise", eps=EPS, epochs=1, batch_size=8, seed=0)
    full, _ = universal_attack(tiny_model, tiny_train[:8], cfg, tiny_anchors)
    masks = ((0, 0, 0, 0), (0, 0, 0, 1), (1, 1, 1, 1))
    doc = ablate_partial_sequence(
        tiny_model, tiny_val, tiny_train[:8], tiny_anchors, full, tmp_path / "part",
        masks=masks, attack_cfg=cfg,
    )
    rows = {r["mask"]: r for r in doc["rows"]}
    assert set(rows) == {"0000", "0001", "1111"}
    # empty mask: clean everywhere; full mask: both columns share one perturbation
    assert rows["0000"]["restricted_full"] == doc["clean_map"]
    assert rows["0000"]["mask_specific"] == doc["clean_map"]
    assert rows["1111"]["restricted_full"] == rows["1111"]["mask_specific"]


def test_ablate_patch_empty_positions_is_size_only(tmp_path, tiny_model, tiny_val,
                                                   tiny_anchors, tiny_train):
    doc = ablate_patch(
        tiny_model, tiny_val, tiny_train[:8], tiny_anchors, tmp_path / "patch",
        sizes=(5,), positions=None, attack_epochs=1, batch_size=8,
    )
    assert len(doc["cells"]) == 1
    assert doc["cells"][0]["position"] == "center"
    assert "5" in doc["position_spread"]


# -------------------------------------------------------------------- CLI


def test_cli_pipeline(tmp_path):
    data = tmp_path / "data"
    main([
        "gen-data", "--out", str(data), "--train-scenes", "2", "--val-scenes", "1",
        "--height", "32", "--width", "48", "--t", "4", "--keyframes", "5", "--seed", "3",
    ])
    assert (data / "train").is_dir() and (data / "val").is_dir()
    assert len(list((data / "train").iterdir())) == 2

    anchors_path = tmp_path / "anchors.json"
    main(["anchors", "--data", str(data / "train"), "--k", "4", "--out", str(anchors_path)])
    shapes = json.loads(anchors_path.read_text())["shapes"]
    assert len(shapes) == 4

    model_path = tmp_path / "model.ckpt"
    main([
        "train", "--data", str(data / "train"), "--val", str(data / "val"),
        "--anchors", str(anchors_path), "--epochs", "1", "--t", "4",
        "--out", str(model_path),
    ])
    assert model_path.exists()
    meta = json.loads((tmp_path / "model.ckpt.json").read_text())
    assert "clean_map" in meta

    pert_path = tmp_path / "pert.bin"
    main([
        "attack", "--model", str(model_path), "--data", str(data / "train"),
        "--anchors", str(anchors_path), "--kind", "noise", "--eps", "10/255",
        "--epochs", "1", "--out", str(pert_path),
    ])
    assert pert_path.exists()

    report = tmp_path / "report.json"
    rows = tmp_path / "rows.csv"
    main([
        "eval", "--model", str(model_path), "--data", str(data / "val"),
        "--anchors", str(anchors_path), "--pert", str(pert_path),
        "--csv", str(rows), "--out", str(report),
    ])
    doc = json.loads(report.read_text())
    assert "map" in doc and "per_class_ap" in doc
    assert rows.read_text().count("\n") == 1

    viz = tmp_path / "viz.png"
    main(["viz", "--pert", str(pert_path), "--out", str(viz)])
    assert (tmp_path / "viz_f0.png").exists()

    render = tmp_path / "render.png"
    main([
        "render", "--model", str(model_path), "--data", str(data / "val"),
        "--anchors", str(anchors_path), "--index", "0", "--out", str(render),
    ])
    assert render.exists()

    defended = tmp_path / "defended.ckpt"
    main([
        "defend", "--strategy", "rfgsm", "--data", str(data / "train"),
        "--anchors", str(anchors_path), "--t", "4", "--eps", "10/255",
        "--epochs", "1", "--out", str(defended),
    ])
    assert defended.exists()


def test_cli_eval_with_frame_mask(tmp_path, tiny_model, tiny_anchors, tiny_val):
    # partial-sequence evaluation through the eval subcommand surface
    from advfusion.attacks import save_perturbation
    from advfusion.data import save_scene

    from advfusion.anchors import save_anchors
    from advfusion.detector import save_checkpoint

    data = tmp_path / "val"
    from advfusion.data import generate_scene

    save_scene(data, "scene_0", generate_scene(replace(TINY_SCENE, seed=900)))
    model_path = tmp_path / "m.ckpt"
    save_checkpoint(model_path, tiny_model, {"seed": 0})
    anchors_path = tmp_path / "a.json"
    save_anchors(anchors_path, tiny_anchors)
    pert_path = tmp_path / "p.bin"
    save_perturbation(pert_path, init_noise((4, 32, 48, 3), EPS, seed=1))

    out = tmp_path / "masked.json"
    main([
        "eval", "--model", str(model_path), "--data", str(data.parent / "val"),
        "--anchors", str(anchors_path), "--pert", str(pert_path),
        "--frame-mask", "0001", "--out", str(out),
    ])
    assert json.loads(out.read_text())["map"] >= 0.0
