"""Command-line entry points: convert, train, finetune, eval, predict, visualize.

Every run echoes its fully resolved configuration before doing work.  Exit
codes: 0 success, 2 validation error, 3 I/O error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from gazefollower.codec import decode_gaze_point
from gazefollower.data.augment import AugmentConfig
from gazefollower.data.convert import convert_gazefollow, convert_videoattentiontarget
from gazefollower.data.dataset import load_image, normalize_image
from gazefollower.data.manifest import (
    GazeSample,
    HeadBox,
    ManifestError,
    load_manifest,
    save_manifest,
)
from gazefollower.losses import LossWeights
from gazefollower.metrics import write_report
from gazefollower.model import ModelConfig
from gazefollower.backbone import ViTConfig
from gazefollower.train import (
    FinetuneConfig,
    TrainConfig,
    evaluate,
    finetune_video,
    load_checkpoint,
    resolve_device,
    train,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_RUNTIME = 4

_SECTION_TYPES = {
    "train": TrainConfig,
    "finetune": FinetuneConfig,
    "model": ModelConfig,
}
_NESTED_TYPES = {
    "loss_weights": LossWeights,
    "augment": AugmentConfig,
    "vit": ViTConfig,
}


class CliValidationError(ValueError):
    pass


def _coerce_value(raw: str):
    return yaml.safe_load(raw)


def load_config(path: str | None, overrides: list[str]) -> dict:
    """Merge the YAML config file with ``--set section.key=value`` overrides."""
    cfg: dict = {}
    if path:
        text = Path(path).read_text(encoding="utf-8")
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise CliValidationError(f"config root must be a mapping, got {type(loaded)}")
        cfg = loaded
    for item in overrides or []:
        if "=" not in item:
            raise CliValidationError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise CliValidationError(f"override path {key!r} crosses a non-mapping")
        node[parts[-1]] = _coerce_value(raw)
    return cfg


def _build_section(section: str, data: dict):
    """Instantiate the dataclass for a config section, rejecting unknown keys."""
    cls = _SECTION_TYPES[section]
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise CliValidationError(
            f"unknown {section} config keys: {', '.join(sorted(unknown))}"
        )
    kwargs = dict(data)
    for name, sub_cls in _NESTED_TYPES.items():
        if name in kwargs and isinstance(kwargs[name], dict):
            sub_known = {f.name for f in dataclasses.fields(sub_cls)}
            sub_unknown = set(kwargs[name]) - sub_known
            if sub_unknown:
                raise CliValidationError(
                    f"unknown {section}.{name} keys: {', '.join(sorted(sub_unknown))}"
                )
            sub = dict(kwargs[name])
            for tup_key in ("out_size", "capture_blocks"):
                if tup_key in sub and isinstance(sub[tup_key], list):
                    sub[tup_key] = tuple(sub[tup_key])
            kwargs[name] = sub_cls(**sub)
    if section == "model" and isinstance(kwargs.get("head_widths"), list):
        kwargs["head_widths"] = tuple(kwargs["head_widths"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CliValidationError(f"bad {section} config: {exc}") from exc


def _echo_config(label: str, obj) -> None:
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    print(f"--- resolved {label} config ---")
    print(yaml.safe_dump(obj, sort_keys=True, default_flow_style=None).rstrip())
    print("---")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_convert(args) -> int:
    _echo_args("convert", args, ["format", "input", "images_root", "split", "out"])
    split = args.split
    if args.format in ("gazefollow_train", "gazefollow_test"):
        samples = convert_gazefollow(args.input, args.images_root, split)
    elif args.format == "videoattentiontarget":
        samples = convert_videoattentiontarget(args.input, args.images_root, split)
    else:
        raise CliValidationError(f"unknown format {args.format!r}")
    save_manifest(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg_dict = load_config(args.config, args.set)
    train_cfg = _build_section("train", cfg_dict.get("train", {}))
    model_cfg = _build_section("model", cfg_dict.get("model", {}))
    _echo_config("train", train_cfg)
    _echo_config("model", model_cfg)
    path, history = train(
        train_cfg,
        args.manifest,
        args.images_root,
        args.out,
        seed=args.seed,
        device=args.device,
        model_cfg=model_cfg,
        backbone_checkpoint=args.backbone_checkpoint,
    )
    print(f"final checkpoint: {path} ({len(history)} steps)")
    return EXIT_OK


def _cmd_finetune(args) -> int:
    cfg_dict = load_config(args.config, args.set)
    ft_cfg = _build_section("finetune", cfg_dict.get("finetune", {}))
    _echo_config("finetune", ft_cfg)
    path, history = finetune_video(
        ft_cfg,
        args.checkpoint,
        args.manifest,
        args.images_root,
        args.out,
        seed=args.seed,
        device=args.device,
    )
    print(f"final checkpoint: {path} ({len(history)} steps)")
    return EXIT_OK


def _echo_args(label: str, args, keys: list[str]) -> None:
    resolved = {k: getattr(args, k) for k in keys}
    _echo_config(label, {k: (str(v) if v is not None else None) for k, v in resolved.items()})


def _cmd_eval(args) -> int:
    _echo_args("eval", args, ["checkpoint", "manifest", "images_root",
                              "resolution", "device", "seed", "out"])
    report = evaluate(
        args.checkpoint,
        args.manifest,
        args.images_root,
        resolution=args.resolution,
        device=args.device,
    )
    for name, (value, count) in report.items():
        print(f"{name} {value:.6f} {count}")
    if args.out:
        write_report(report, args.out)
        print(f"report written to {args.out}")
    return EXIT_OK


def _parse_head_box(raw: list[float]) -> HeadBox:
    try:
        return HeadBox(*raw)
    except (TypeError, ValueError) as exc:
        raise CliValidationError(
            f"invalid head box {raw}: {exc}; expected normalized "
            "x_min y_min x_max y_max with 0 <= min < max <= 1"
        ) from exc


def _cmd_predict(args) -> int:
    _echo_args("predict", args, ["checkpoint", "image", "head_box",
                                 "resolution", "device", "seed"])
    head = _parse_head_box(args.head_box)
    device = resolve_device(args.device)
    model = load_checkpoint(args.checkpoint, device)
    image01 = load_image(args.image)
    res = args.resolution
    image = torch.nn.functional.interpolate(
        image01.unsqueeze(0), size=(res, res), mode="bilinear", align_corners=False
    ).squeeze(0)
    image = normalize_image(image)
    with torch.no_grad():
        out = model(
            image.unsqueeze(0).to(device),
            torch.tensor([head.to_list()], dtype=torch.float32, device=device),
        )
    heatmap = out["heatmap"][0].cpu().numpy()
    gaze_x, gaze_y = decode_gaze_point(heatmap)
    record = {
        "gaze_x": gaze_x,
        "gaze_y": gaze_y,
        "p_out": float(out["p_out"][0]),
    }
    print(json.dumps(record))
    if args.out:
        Path(args.out).write_text(json.dumps(record) + "\n", encoding="utf-8")
    if args.heatmap_out:
        hm = heatmap - heatmap.min()
        if hm.max() > 0:
            hm = hm / hm.max()
        Image.fromarray((hm * 255).astype(np.uint8)).save(args.heatmap_out)
    return EXIT_OK


def _cmd_visualize(args) -> int:
    from gazefollower.viz import render_prediction_overlays

    _echo_args("visualize", args, ["checkpoint", "manifest", "images_root",
                                   "index", "resolution", "device", "out"])
    device = resolve_device(args.device)
    model = load_checkpoint(args.checkpoint, device)
    samples = load_manifest(args.manifest)
    if args.index >= len(samples):
        raise CliValidationError(
            f"sample index {args.index} out of range ({len(samples)} samples)"
        )
    sample: GazeSample = samples[args.index]
    image01 = load_image(Path(args.images_root) / sample.image_ref)
    res = args.resolution
    image01 = torch.nn.functional.interpolate(
        image01.unsqueeze(0), size=(res, res), mode="bilinear", align_corners=False
    ).squeeze(0)
    normalized = normalize_image(image01)
    paths = render_prediction_overlays(
        model,
        image01,
        normalized,
        torch.tensor(sample.head.to_list(), dtype=torch.float32),
        args.out,
        stem=f"sample{args.index}",
    )
    for p in paths:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gazefollower",
        description="Gaze-target prediction: data conversion, training, "
        "evaluation, prediction, and visualization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=False):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--device", default=None, help="cpu or cuda; else env/cpu")
        if config:
            p.add_argument("--config", default=None, help="YAML config file")
            p.add_argument(
                "--set", action="append", default=[], metavar="KEY=VALUE",
                help="override a config value, e.g. train.base_lr=0.001",
            )

    p = sub.add_parser("convert", help="convert public annotations to a manifest")
    p.add_argument("--format", required=True,
                   choices=["gazefollow_train", "gazefollow_test", "videoattentiontarget"])
    p.add_argument("--input", required=True)
    p.add_argument("--images-root", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("train", help="train from a manifest")
    add_common(p, config=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--images-root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backbone-checkpoint", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("finetune", help="fine-tune an existing checkpoint")
    add_common(p, config=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--images-root", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--images-root", required=True)
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--out", default=None, help="write the metrics report here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="predict gaze for one image + head box")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--head-box", type=float, nargs=4, required=True,
                   metavar=("X_MIN", "Y_MIN", "X_MAX", "Y_MAX"))
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--out", default=None, help="write the JSON record here")
    p.add_argument("--heatmap-out", default=None, help="write the heatmap image here")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("visualize", help="render guidance/interaction overlays")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--images-root", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_visualize)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliValidationError, ManifestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, FileNotFoundError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
