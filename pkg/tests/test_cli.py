"""End-to-end CLI behavior on tiny synthetic inputs."""

import json

import numpy as np
import pytest
import torch
from PIL import Image

from synth import write_synthetic_dataset

from gazefollower.backbone import ViTConfig
from gazefollower.cli import EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from gazefollower.data.manifest import load_manifest
from gazefollower.model import GazeModel, ModelConfig
from gazefollower.train import save_checkpoint


@pytest.fixture
def toy_checkpoint(tmp_path):
    model = GazeModel(ModelConfig(
        vit=ViTConfig(embed_dim=8, depth=2, num_heads=2, patch_size=14,
                      mlp_ratio=2.0, pos_grid=4, capture_blocks=(1, 2)),
        guidance_hidden=4, head_widths=(3, 3, 3),
    ))
    path = tmp_path / "toy.pt"
    save_checkpoint(model, path)
    return path


class TestConvert:
    def test_gazefollow_format(self, tmp_path):
        images = tmp_path / "imgs"
        images.mkdir()
        Image.new("RGB", (100, 80)).save(images / "a.png")
        ann = tmp_path / "train_annotations.txt"
        # path,idx,body(4),eye(2),gaze(2),head_px(4),inout
        rows = [
            "a.png,0,1,1,10,10,0.3,0.3,0.5,0.6,10,8,30,24,1",
            "a.png,1,1,1,10,10,0.8,0.2,0.9,0.1,60,10,80,30,1",
        ]
        ann.write_text("\n".join(rows) + "\n")
        out = tmp_path / "manifest.jsonl"
        code = main([
            "convert", "--format", "gazefollow_train", "--input", str(ann),
            "--images-root", str(images), "--split", "train", "--out", str(out),
        ])
        assert code == EXIT_OK
        samples = load_manifest(out)
        assert len(samples) == 2
        assert samples[0].head.x_min == pytest.approx(0.1)
        assert samples[0].head.y_max == pytest.approx(0.3)
        assert samples[0].gaze_points == [(0.5, 0.6)]
        assert len(samples[0].all_heads) == 2

    def test_gazefollow_test_rows_merge_annotations(self, tmp_path):
        images = tmp_path / "imgs"
        images.mkdir()
        Image.new("RGB", (100, 100)).save(images / "t.png")
        ann = tmp_path / "test_annotations.txt"
        rows = [
            f"t.png,0,1,1,5,5,0.3,0.3,{0.1 * k},0.5,10,10,30,30" for k in range(1, 4)
        ]
        ann.write_text("\n".join(rows) + "\n")
        out = tmp_path / "m.jsonl"
        code = main([
            "convert", "--format", "gazefollow_test", "--input", str(ann),
            "--images-root", str(images), "--split", "test", "--out", str(out),
        ])
        assert code == EXIT_OK
        samples = load_manifest(out)
        assert len(samples) == 1
        assert len(samples[0].gaze_points) == 3
        assert samples[0].split == "test"

    def test_videoattentiontarget_format(self, tmp_path):
        images = tmp_path / "frames" / "showA" / "clip1"
        images.mkdir(parents=True)
        for name in ("f1.jpg", "f2.jpg"):
            Image.new("RGB", (64, 48)).save(images / name)
        ann = tmp_path / "ann" / "showA" / "clip1"
        ann.mkdir(parents=True)
        (ann / "person1.txt").write_text(
            "f1.jpg,8,6,24,18,40,30\n"
            "f2.jpg,8,6,24,18,-1,-1\n"
        )
        out = tmp_path / "m.jsonl"
        code = main([
            "convert", "--format", "videoattentiontarget",
            "--input", str(tmp_path / "ann"),
            "--images-root", str(tmp_path / "frames"),
            "--split", "test", "--out", str(out),
        ])
        assert code == EXIT_OK
        samples = load_manifest(out)
        assert len(samples) == 2
        assert samples[0].inside and samples[0].gaze_points == [(40 / 64, 30 / 48)]
        assert not samples[1].inside

    def test_missing_image_is_io_error(self, tmp_path):
        ann = tmp_path / "a.txt"
        ann.write_text("missing.png,0,1,1,5,5,0.3,0.3,0.5,0.5,10,10,30,30,1\n")
        code = main([
            "convert", "--format", "gazefollow_train", "--input", str(ann),
            "--images-root", str(tmp_path), "--out", str(tmp_path / "m.jsonl"),
        ])
        assert code == EXIT_IO


class TestPredict:
    def test_prediction_record_schema(self, tmp_path, toy_checkpoint):
        img = tmp_path / "scene.png"
        Image.fromarray(
            (np.random.default_rng(0).random((56, 56, 3)) * 255).astype(np.uint8)
        ).save(img)
        out = tmp_path / "pred.json"
        code = main([
            "predict", "--checkpoint", str(toy_checkpoint), "--image", str(img),
            "--head-box", "0.2", "0.2", "0.5", "0.5",
            "--resolution", "56", "--out", str(out),
        ])
        assert code == EXIT_OK
        record = json.loads(out.read_text())
        assert set(record) == {"gaze_x", "gaze_y", "p_out"}
        assert 0.0 <= record["gaze_x"] <= 1.0
        assert 0.0 <= record["gaze_y"] <= 1.0
        assert 0.0 <= record["p_out"] <= 1.0

    def test_identical_inputs_identical_outputs(self, tmp_path, toy_checkpoint):
        img = tmp_path / "scene.png"
        Image.fromarray(
            (np.random.default_rng(1).random((56, 56, 3)) * 255).astype(np.uint8)
        ).save(img)
        outs = []
        for name in ("a.json", "b.json"):
            out = tmp_path / name
            assert main([
                "predict", "--checkpoint", str(toy_checkpoint), "--image", str(img),
                "--head-box", "0.2", "0.2", "0.5", "0.5",
                "--resolution", "56", "--out", str(out),
            ]) == EXIT_OK
            outs.append(out.read_text())
        assert outs[0] == outs[1]

    def test_invalid_box_is_validation_error(self, tmp_path, toy_checkpoint):
        img = tmp_path / "scene.png"
        Image.new("RGB", (56, 56)).save(img)
        code = main([
            "predict", "--checkpoint", str(toy_checkpoint), "--image", str(img),
            "--head-box", "0.2", "0.2", "1.5", "0.5", "--resolution", "56",
        ])
        assert code == EXIT_VALIDATION

    def test_heatmap_image_written(self, tmp_path, toy_checkpoint):
        img = tmp_path / "scene.png"
        Image.new("RGB", (56, 56), (120, 90, 200)).save(img)
        hm_out = tmp_path / "heat.png"
        code = main([
            "predict", "--checkpoint", str(toy_checkpoint), "--image", str(img),
            "--head-box", "0.1", "0.1", "0.4", "0.4",
            "--resolution", "56", "--heatmap-out", str(hm_out),
        ])
        assert code == EXIT_OK
        assert hm_out.exists()
        with Image.open(hm_out) as rendered:
            assert rendered.size == (32, 32)  # 4x4 grid upscaled 8x


class TestVisualize:
    def test_writes_four_overlays(self, tmp_path, toy_checkpoint):
        manifest, images = write_synthetic_dataset(tmp_path / "d", n=2, size=56)
        out_dir = tmp_path / "viz"
        code = main([
            "visualize", "--checkpoint", str(toy_checkpoint),
            "--manifest", str(manifest), "--images-root", str(images),
            "--index", "1", "--resolution", "56", "--out", str(out_dir),
        ])
        assert code == EXIT_OK
        pngs = sorted(out_dir.glob("*.png"))
        assert len(pngs) == 4
        names = {p.name for p in pngs}
        assert any("guidance" in n for n in names)
        assert any("heatmap" in n for n in names)
        assert sum("interaction" in n for n in names) == 2

    def test_index_out_of_range(self, tmp_path, toy_checkpoint):
        manifest, images = write_synthetic_dataset(tmp_path / "d", n=1, size=56)
        code = main([
            "visualize", "--checkpoint", str(toy_checkpoint),
            "--manifest", str(manifest), "--images-root", str(images),
            "--index", "5", "--resolution", "56", "--out", str(tmp_path / "v"),
        ])
        assert code == EXIT_VALIDATION


class TestEvalCommand:
    def test_report_file(self, tmp_path, toy_checkpoint):
        manifest, images = write_synthetic_dataset(tmp_path / "d", n=3, size=56)
        out = tmp_path / "report.txt"
        code = main([
            "eval", "--checkpoint", str(toy_checkpoint), "--manifest", str(manifest),
            "--images-root", str(images), "--resolution", "56", "--out", str(out),
        ])
        assert code == EXIT_OK
        lines = out.read_text().strip().splitlines()
        names = {line.split()[0] for line in lines}
        assert {"auc", "min_dist", "avg_dist"} <= names
        for line in lines:
            parts = line.split()
            assert len(parts) == 3
            float(parts[1]), int(parts[2])


class TestConfigHandling:
    def test_unknown_key_rejected(self, tmp_path):
        manifest, images = write_synthetic_dataset(tmp_path / "d", n=2, size=56)
        code = main([
            "train", "--manifest", str(manifest), "--images-root", str(images),
            "--out", str(tmp_path / "run"),
            "--set", "train.not_a_real_knob=1",
        ])
        assert code == EXIT_VALIDATION

    def test_overrides_and_echo(self, tmp_path, capsys):
        manifest, images = write_synthetic_dataset(tmp_path / "d", n=2, size=56)
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text(
            "train:\n  epochs: 1\n  batch_size: 2\n  base_resolution: 56\n"
            "  final_epoch_resolution: 56\n  max_steps: 1\n"
            "  base_lr: 0.001\n  final_lr: 0.0001\n"
            "model:\n  guidance_hidden: 4\n  head_widths: [3, 3, 3]\n"
            "  vit: {embed_dim: 8, depth: 1, num_heads: 2, patch_size: 14, "
            "mlp_ratio: 2.0, pos_grid: 4, capture_blocks: [1]}\n"
        )
        code = main([
            "train", "--config", str(cfg), "--manifest", str(manifest),
            "--images-root", str(images), "--out", str(tmp_path / "run"),
            "--set", "train.base_lr=0.0005",
        ])
        captured = capsys.readouterr().out
        assert code == EXIT_OK
        assert "resolved train config" in captured
        assert "0.0005" in captured

    def test_malformed_override_rejected(self, tmp_path):
        manifest, images = write_synthetic_dataset(tmp_path / "d", n=2, size=56)
        code = main([
            "train", "--manifest", str(manifest), "--images-root", str(images),
            "--out", str(tmp_path / "r"), "--set", "definitely-not-key-value",
        ])
        assert code == EXIT_VALIDATION
