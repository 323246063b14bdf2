"""Training, fine-tuning, and evaluation loops.

The recipe: AdamW with decoupled weight decay, linear warmup into a cosine
decay from ``base_lr`` to ``final_lr``, layer-wise learning-rate decay over
the transformer blocks, and a resolution bump for the final epoch.  Video
fine-tuning reuses the loop with a fixed learning rate for one epoch, frames
treated independently.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader

from gazefollower.codec import decode_gaze_point
from gazefollower.data.augment import AugmentConfig
from gazefollower.data.dataset import GazeDataset, collate_samples
from gazefollower.data.manifest import GazeSample, load_manifest
from gazefollower.losses import LossWeights, aux_loss, heatmap_loss, inout_loss, total_loss
from gazefollower.metrics import gaze_distances, heatmap_auc, watching_outside_ap
from gazefollower.model import GazeModel, ModelConfig

DEVICE_ENV_VAR = "GAZEFOLLOWER_DEVICE"

CHECKPOINT_FORMAT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def resolve_device(explicit: str | None = None) -> torch.device:
    """Pick the compute device: explicit argument, else env var, else CPU."""
    name = explicit or os.environ.get(DEVICE_ENV_VAR) or "cpu"
    return torch.device(name)


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    final_lr: float = 0.001
    weight_decay: float = 0.1
    momentum_decay: float = 0.9
    variance_decay: float = 0.99
    epsilon: float = 1e-8
    layerwise_decay: float = 0.65
    warmup_ratio: float = 0.01
    epochs: int = 15
    batch_size: int = 48
    base_resolution: int = 224
    final_epoch_resolution: int = 518
    loss_weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    num_workers: int = 0
    log_every: int = 10
    # optional hard cap on optimizer steps (smoke tests); None = full run
    max_steps: int | None = None

    def __post_init__(self) -> None:
        if self.base_lr <= 0 or self.final_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in [0, 1)")


@dataclass
class FinetuneConfig:
    lr: float = 1e-4
    epochs: int = 1
    batch_size: int = 48
    weight_decay: float = 0.1
    momentum_decay: float = 0.9
    variance_decay: float = 0.99
    epsilon: float = 1e-8
    layerwise_decay: float = 0.65
    resolution: int = 224
    loss_weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    num_workers: int = 0
    log_every: int = 10
    max_steps: int | None = None

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")


# ---------------------------------------------------------------------------
# schedule and parameter groups
# ---------------------------------------------------------------------------


def cosine_warmup_lr(
    step: int, total_steps: int, base_lr: float, final_lr: float, warmup_ratio: float
) -> float:
    """Learning rate at optimizer step ``step`` (0-based).

    Linear warmup over the first ``warmup_ratio`` of all steps ends exactly at
    ``base_lr``; the cosine segment then decays to exactly ``final_lr`` at the
    last step.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    warmup_steps = int(math.ceil(warmup_ratio * total_steps))
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - 1 - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return final_lr + (base_lr - final_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_param_groups(
    model: GazeModel, layerwise_decay: float
) -> list[dict]:
    """Parameter groups with per-group learning-rate multipliers.

    Block i of D gets ``decay^(D - i)`` (so the last block gets 1.0), the
    patch/positional/class/mask embeddings get ``decay^D``, the final norm
    rides with the last block, and everything outside the backbone gets 1.0.
    """
    depth = model.cfg.vit.depth
    groups: list[dict] = []

    embed_params = list(model.backbone.patch_embed.parameters())
    embed_params += [
        model.backbone.cls_token,
        model.backbone.mask_token,
        model.backbone.pos_embed,
    ]
    groups.append(
        {"params": embed_params, "lr_scale": layerwise_decay**depth, "name": "embed"}
    )
    for i, block in enumerate(model.backbone.blocks, start=1):
        groups.append(
            {
                "params": list(block.parameters()),
                "lr_scale": layerwise_decay ** (depth - i),
                "name": f"block{i}",
            }
        )
    groups.append(
        {
            "params": list(model.backbone.norm.parameters()),
            "lr_scale": 1.0,
            "name": "final_norm",
        }
    )
    decoder_params = [
        p for m in model.decoder_modules().values() for p in m.parameters()
    ]
    groups.append({"params": decoder_params, "lr_scale": 1.0, "name": "decoder"})

    counted = sum(len(g["params"]) for g in groups)
    assert counted == len(list(model.parameters())), "parameter group coverage gap"
    return groups


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr * group["lr_scale"]


def _make_optimizer(groups: list[dict], cfg) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        groups,
        lr=0.0,  # overwritten by the schedule before the first step
        betas=(cfg.momentum_decay, cfg.variance_decay),
        eps=cfg.epsilon,
        weight_decay=cfg.weight_decay,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    model: GazeModel,
    path: str | Path,
    train_config: dict | None = None,
    schedule_state: dict | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model": model.state_dict(),
        "model_config": _model_config_dict(model.cfg),
        "train_config": train_config,
        "schedule_state": schedule_state,
    }
    torch.save(payload, path)


def _model_config_dict(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["vit"]["capture_blocks"] = list(d["vit"]["capture_blocks"])
    d["head_widths"] = list(d["head_widths"])
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    from gazefollower.backbone import ViTConfig

    vit = dict(d["vit"])
    vit["capture_blocks"] = tuple(vit["capture_blocks"])
    return ModelConfig(
        vit=ViTConfig(**vit),
        guidance_hidden=d.get("guidance_hidden"),
        head_widths=tuple(d["head_widths"]),
        renormalize_attention=d.get("renormalize_attention", False),
    )


def load_checkpoint(path: str | Path, device: torch.device | None = None) -> GazeModel:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model = GazeModel(model_config_from_dict(payload["model_config"]))
    model.load_state_dict(payload["model"])
    if device is not None:
        model.to(device)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _train_samples(manifest: str | Path | list[GazeSample]) -> list[GazeSample]:
    samples = load_manifest(manifest) if not isinstance(manifest, list) else manifest
    train = [s for s in samples if s.split == "train"]
    return train if train else samples


def _run_epochs(
    model: GazeModel,
    dataset: GazeDataset,
    optimizer: torch.optim.Optimizer,
    lr_for_step,
    cfg,
    device: torch.device,
    out_dir: Path,
    seed: int,
    final_epoch_resolution: int | None = None,
) -> list[dict]:
    weights: LossWeights = cfg.loss_weights
    history: list[dict] = []
    log_path = out_dir / "train_log.jsonl"
    step = 0
    model.train()
    with log_path.open("a", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            if (
                final_epoch_resolution is not None
                and epoch == cfg.epochs - 1
                and final_epoch_resolution != dataset.resolution
            ):
                dataset.set_resolution(final_epoch_resolution)
            dataset.set_epoch(epoch)
            loader = DataLoader(
                dataset,
                batch_size=cfg.batch_size,
                shuffle=True,
                num_workers=cfg.num_workers,
                collate_fn=collate_samples,
                generator=torch.Generator().manual_seed(seed + epoch),
            )
            for batch in loader:
                lr = lr_for_step(step)
                _set_lr(optimizer, lr)
                image = batch["image"].to(device)
                out = model(
                    image,
                    batch["head_box"].to(device),
                    batch["patch_mask"].to(device),
                )
                l_hm = heatmap_loss(
                    out["heatmap"], batch["heatmap_gt"].to(device),
                    batch["inside"].to(device),
                )
                l_io = inout_loss(
                    out["p_out"], ~batch["inside"].to(device), weights.focal_gamma
                )
                l_aux = aux_loss(out["aux_map"], batch["aux_gt"].to(device))
                loss = total_loss(l_hm, l_io, l_aux, weights)
                if not torch.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite loss at step {step}: heatmap={l_hm.item()} "
                        f"inout={l_io.item()} aux={l_aux.item()}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                record = {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss": loss.item(),
                    "loss_heatmap": l_hm.item(),
                    "loss_inout": l_io.item(),
                    "loss_aux": l_aux.item(),
                }
                history.append(record)
                if step % cfg.log_every == 0:
                    log.write(json.dumps(record) + "\n")
                    log.flush()
                step += 1
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            save_checkpoint(
                model,
                out_dir / f"checkpoint_epoch{epoch + 1}.pt",
                train_config=dataclasses.asdict(cfg),
                schedule_state={"step": step, "epoch": epoch + 1},
            )
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    return history


def train(
    config: TrainConfig,
    manifest: str | Path | list[GazeSample],
    images_root: str | Path,
    out_dir: str | Path,
    seed: int = 0,
    device: torch.device | str | None = None,
    model_cfg: ModelConfig | None = None,
    backbone_checkpoint: str | Path | None = None,
) -> tuple[Path, list[dict]]:
    """Full training run; returns (final checkpoint path, loss history)."""
    device = resolve_device(str(device) if device is not None else None)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(seed)

    model = GazeModel(model_cfg, require_pretrained=backbone_checkpoint is not None)
    if backbone_checkpoint is not None:
        model.backbone.load_pretrained(backbone_checkpoint)
    model.to(device)

    samples = _train_samples(manifest)
    dataset = GazeDataset(
        samples,
        images_root,
        resolution=config.base_resolution,
        patch_size=model.cfg.vit.patch_size,
        train=True,
        augment_cfg=config.augment,
        seed=seed,
    )
    steps_per_epoch = max(1, math.ceil(len(dataset) / config.batch_size))
    total_steps = steps_per_epoch * config.epochs
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)

    groups = build_param_groups(model, config.layerwise_decay)
    optimizer = _make_optimizer(groups, config)

    def lr_for_step(step: int) -> float:
        return cosine_warmup_lr(
            step, total_steps, config.base_lr, config.final_lr, config.warmup_ratio
        )

    history = _run_epochs(
        model,
        dataset,
        optimizer,
        lr_for_step,
        config,
        device,
        out_dir,
        seed,
        final_epoch_resolution=config.final_epoch_resolution,
    )
    final_path = out_dir / "checkpoint.pt"
    save_checkpoint(
        model,
        final_path,
        train_config=dataclasses.asdict(config),
        schedule_state={"step": len(history), "epoch": config.epochs},
    )
    return final_path, history


def finetune_video(
    config: FinetuneConfig,
    init_checkpoint: str | Path,
    manifest: str | Path | list[GazeSample],
    images_root: str | Path,
    out_dir: str | Path,
    seed: int = 0,
    device: torch.device | str | None = None,
) -> tuple[Path, list[dict]]:
    """One-epoch fixed-lr fine-tuning from an existing checkpoint.

    Frames are independent samples; an empty manifest produces a checkpoint
    identical to the initialisation.
    """
    device = resolve_device(str(device) if device is not None else None)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    init_checkpoint = Path(init_checkpoint)
    if not init_checkpoint.exists():
        raise FileNotFoundError(f"init checkpoint not found: {init_checkpoint}")
    torch.manual_seed(seed)

    model = load_checkpoint(init_checkpoint, device)
    samples = _train_samples(manifest)
    history: list[dict] = []
    if samples:
        dataset = GazeDataset(
            samples,
            images_root,
            resolution=config.resolution,
            patch_size=model.cfg.vit.patch_size,
            train=True,
            augment_cfg=config.augment,
            seed=seed,
        )
        groups = build_param_groups(model, config.layerwise_decay)
        optimizer = _make_optimizer(groups, config)
        history = _run_epochs(
            model,
            dataset,
            optimizer,
            lambda step: config.lr,
            config,
            device,
            out_dir,
            seed,
            final_epoch_resolution=None,
        )
    final_path = out_dir / "checkpoint.pt"
    save_checkpoint(
        model,
        final_path,
        train_config=dataclasses.asdict(config),
        schedule_state={"step": len(history), "epoch": config.epochs},
    )
    return final_path, history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate_model(
    model: GazeModel,
    samples: list[GazeSample],
    images_root: str | Path,
    resolution: int = 224,
    batch_size: int = 8,
    device: torch.device | str | None = None,
) -> dict[str, tuple[float, int]]:
    """Forward every sample, decode, and aggregate the benchmark metrics.

    Heatmap AUC and distances cover in-frame samples; AP over the
    watching-outside probabilities is included whenever the manifest carries
    any outside label (video-style evaluation).
    """
    device = resolve_device(str(device) if device is not None else None)
    model.to(device)
    model.eval()
    dataset = GazeDataset(
        samples,
        images_root,
        resolution=resolution,
        patch_size=model.cfg.vit.patch_size,
        train=False,
        seed=0,
    )
    loader = DataLoader(
        dataset, batch_size=batch_size, shuffle=False, collate_fn=collate_samples
    )
    aucs: list[float] = []
    min_dists: list[float] = []
    avg_dists: list[float] = []
    p_outs: list[float] = []
    labels_out: list[bool] = []
    with torch.no_grad():
        for batch in loader:
            out = model(
                batch["image"].to(device),
                batch["head_box"].to(device),
            )
            heatmaps = out["heatmap"].cpu().numpy()
            probs = out["p_out"].cpu().numpy()
            for i in range(len(heatmaps)):
                inside = bool(batch["inside"][i])
                points = batch["gaze_points"][i]
                p_outs.append(float(probs[i]))
                labels_out.append(not inside)
                if inside and points:
                    decoded = decode_gaze_point(heatmaps[i])
                    mn, avg = gaze_distances(decoded, points)
                    min_dists.append(mn)
                    avg_dists.append(avg)
                    try:
                        aucs.append(heatmap_auc(heatmaps[i], points))
                    except ValueError:
                        pass
    report: dict[str, tuple[float, int]] = {}
    if aucs:
        report["auc"] = (float(np.mean(aucs)), len(aucs))
    if min_dists:
        report["min_dist"] = (float(np.mean(min_dists)), len(min_dists))
        report["avg_dist"] = (float(np.mean(avg_dists)), len(avg_dists))
    if any(labels_out):
        report["ap"] = (watching_outside_ap(p_outs, labels_out), len(p_outs))
    return report


def evaluate(
    checkpoint: str | Path,
    manifest: str | Path | list[GazeSample],
    images_root: str | Path,
    resolution: int = 224,
    batch_size: int = 8,
    device: torch.device | str | None = None,
) -> dict[str, tuple[float, int]]:
    samples = load_manifest(manifest) if not isinstance(manifest, list) else manifest
    model = load_checkpoint(checkpoint)
    return evaluate_model(
        model, samples, images_root, resolution=resolution,
        batch_size=batch_size, device=device,
    )
