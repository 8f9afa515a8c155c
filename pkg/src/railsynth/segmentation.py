"""Binary railway segmentation: compact U-shaped network, Jaccard loss,
and the seeded training loop.

The backbone is deliberately small (the interesting part of this pipeline
is the data, not the network) and swappable behind ModelConfig: anything
that maps an H×W×C stack to an H×W probability map satisfies the
contract. Flow fusion is plain channel concatenation of the fused input
stack (see optical_flow.fuse_inputs).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import raster
from .compositor import augment
from .errors import ValidationError
from .optical_flow import FlowField, fuse_inputs, read_flow_file
from .scene_model import CompositeSample, PlacementSpec, load_manifest

log = logging.getLogger(__name__)

JACCARD_EPS = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3     # 3 = RGB, 5 = RGB + flow
    base_width: int = 16
    depth: int = 4

    def __post_init__(self):
        if self.in_channels not in (3, 5):
            raise ValidationError(f"in_channels must be 3 or 5, got {self.in_channels}")
        if self.base_width < 1 or self.depth < 1:
            raise ValidationError(f"invalid model config {self}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 20
    lr: float = 3e-4
    weight_decay: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValidationError(
                f"val_fraction must be in (0, 1), got {self.val_fraction}")


def jaccard_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft Jaccard loss: 1 - |pred . target| / |pred + target - pred . target|.

    ``pred`` holds probabilities in [0, 1]; ``target`` is binary. Accepts
    (H, W) or (B, H, W); batches are averaged per sample. Differentiable
    in pred.
    """
    if pred.shape != target.shape:
        raise ValidationError(
            f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if pred.dim() == 2:
        pred = pred.unsqueeze(0)
        target = target.unsqueeze(0)
    pred = pred.reshape(pred.shape[0], -1)
    target = target.reshape(target.shape[0], -1).to(pred.dtype)
    inter = (pred * target).sum(dim=1)
    union = pred.sum(dim=1) + target.sum(dim=1) - inter
    return (1.0 - (inter + JACCARD_EPS) / (union + JACCARD_EPS)).mean()


class _DoubleConv(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class RailNet(nn.Module):
    """Small encoder-decoder with skip connections and a sigmoid head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        widths = [w * 2 ** i for i in range(config.depth)]
        self.encoders = nn.ModuleList()
        c_prev = config.in_channels
        for c in widths:
            self.encoders.append(_DoubleConv(c_prev, c))
            c_prev = c
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _DoubleConv(widths[-1], widths[-1] * 2)
        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        c_prev = widths[-1] * 2
        for c in reversed(widths):
            self.upconvs.append(nn.ConvTranspose2d(c_prev, c, 2, stride=2))
            self.decoders.append(_DoubleConv(c * 2, c))
            c_prev = c
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([skip, x], dim=1))
        return torch.sigmoid(self.head(x)).squeeze(1)


def _pad_to_multiple(stack: torch.Tensor, multiple: int):
    """Reflect-pad (B, C, H, W) so H and W divide ``multiple``."""
    h, w = stack.shape[-2:]
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph or pw:
        stack = torch.nn.functional.pad(stack, (0, pw, 0, ph), mode="reflect")
    return stack, (h, w)


def forward(model: RailNet, stack: np.ndarray) -> np.ndarray:
    """Run inference on one fused H×W×C stack; returns an H×W probability map."""
    cfg = model.config
    if stack.ndim != 3 or stack.shape[2] != cfg.in_channels:
        raise ValidationError(
            f"stack has {stack.shape[2] if stack.ndim == 3 else '?'} channels, "
            f"model expects {cfg.in_channels}")
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(stack, dtype=np.float32))
        x = x.permute(2, 0, 1).unsqueeze(0)
        x, (h, w) = _pad_to_multiple(x, 2 ** cfg.depth)
        prob = model(x)[0, :h, :w]
    return prob.numpy()


def _flow_path_for(manifest_path: Path, frame_t_rel: str,
                   flow_dir: str | Path | None) -> Path:
    base = Path(flow_dir) if flow_dir else manifest_path.parent / "flow"
    return base / (Path(frame_t_rel).stem + ".rsfl")


def _load_sample(manifest_path: Path, rec, use_flow: bool,
                 flow_dir) -> tuple[CompositeSample, FlowField | None]:
    base = manifest_path.parent
    sample = CompositeSample(
        frame_t=raster.load_image(base / rec.frame_t),
        frame_t1=raster.load_image(base / rec.frame_t1),
        mask_t=raster.load_mask(base / rec.mask_t),
        mask_t1=raster.load_mask(base / rec.mask_t1),
        placement=PlacementSpec(anchor=(rec.anchor_x, rec.anchor_y),
                                shift=(rec.dx, rec.dy)),
        scene_id=rec.scene_id, seed=rec.seed,
        weather=rec.weather, category=rec.category)
    flow = None
    if use_flow:
        flow = read_flow_file(_flow_path_for(manifest_path, rec.frame_t, flow_dir))
    return sample, flow


def _stack_for(sample: CompositeSample, flow: FlowField | None) -> np.ndarray:
    if flow is not None and sample.hflipped:
        flow = FlowField(dx=-np.flip(flow.dx, axis=1).copy(),
                         dy=np.flip(flow.dy, axis=1).copy())
    return fuse_inputs(sample.frame_t, flow)


def check_flow_files(manifest_path: str | Path, flow_dir=None) -> list[str]:
    """Relative frame names whose flow raster is missing."""
    manifest_path = Path(manifest_path)
    gaps = []
    for rec in load_manifest(manifest_path):
        if not _flow_path_for(manifest_path, rec.frame_t, flow_dir).is_file():
            gaps.append(rec.frame_t)
    return gaps


def train(manifest_path: str | Path, model_config: ModelConfig,
          train_config: TrainConfig, use_flow: bool = False,
          flow_dir: str | Path | None = None,
          out_dir: str | Path = "checkpoints") -> tuple[Path, list[dict]]:
    """Train on a manifest; returns (best checkpoint path, per-epoch history).

    Fully seeded: the split, shuffles, augmentation draws, and weight init
    all derive from train_config.seed. The best-val-mIoU checkpoint is
    retained; history rows are {epoch, train_loss, val_miou, steps}.
    """
    from .evaluation import confusion_counts, iou

    manifest_path = Path(manifest_path)
    records = load_manifest(manifest_path)
    if not records:
        raise ValidationError(f"manifest {manifest_path} is empty")
    if use_flow:
        gaps = check_flow_files(manifest_path, flow_dir)
        if gaps:
            raise ValidationError(
                f"flow rasters missing for {len(gaps)} sample(s): "
                f"{', '.join(gaps[:5])}{'...' if len(gaps) > 5 else ''}")
    if use_flow != (model_config.in_channels == 5):
        raise ValidationError(
            f"model in_channels={model_config.in_channels} inconsistent with "
            f"use_flow={use_flow}")

    torch.manual_seed(train_config.seed)
    torch.use_deterministic_algorithms(True)
    rng = np.random.default_rng(train_config.seed)

    order = rng.permutation(len(records))
    n_val = max(1, int(round(train_config.val_fraction * len(records))))
    n_val = min(n_val, len(records) - 1) if len(records) > 1 else 0
    val_idx = order[:n_val]
    train_idx = order[n_val:]

    loaded = [_load_sample(manifest_path, rec, use_flow, flow_dir) for rec in records]

    model = RailNet(model_config)
    optimizer = torch.optim.AdamW(model.parameters(), lr=train_config.lr,
                                  weight_decay=train_config.weight_decay)

    def batch_tensors(indices, epoch):
        stacks, masks = [], []
        for j in indices:
            sample, flow = loaded[j]
            aug_rng = np.random.default_rng(
                np.random.SeedSequence(entropy=train_config.seed,
                                       spawn_key=(epoch, int(j))))
            aug = augment(sample, aug_rng)
            stacks.append(_stack_for(aug, flow))
            masks.append(aug.mask_t)
        x = torch.from_numpy(np.stack(stacks).astype(np.float32)).permute(0, 3, 1, 2)
        y = torch.from_numpy(np.stack(masks).astype(np.float32))
        return x, y

    def val_miou():
        model.eval()
        agg = {0: [0, 0, 0, 0], 1: [0, 0, 0, 0]}
        with torch.no_grad():
            for j in val_idx:
                sample, flow = loaded[j]
                prob = forward(model, _stack_for(sample, flow))
                pred = (prob >= 0.5).astype(np.uint8)
                for cls in (0, 1):
                    c = confusion_counts(pred, sample.mask_t, cls)
                    agg[cls][0] += c.tp
                    agg[cls][1] += c.fp
                    agg[cls][2] += c.fn
                    agg[cls][3] += c.tn
        from .evaluation import ConfusionCounts
        ious = [iou(ConfusionCounts(*agg[cls])) for cls in (0, 1)]
        return float(np.mean(ious))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "best.pt"
    history: list[dict] = []
    best = -1.0
    for epoch in range(1, train_config.epochs + 1):
        model.train()
        epoch_order = rng.permutation(train_idx)
        losses = []
        steps = 0
        for start in range(0, len(epoch_order), train_config.batch_size):
            chunk = epoch_order[start:start + train_config.batch_size]
            x, y = batch_tensors(chunk, epoch)
            x, (h, w) = _pad_to_multiple(x, 2 ** model_config.depth)
            y_pad, _ = _pad_to_multiple(y.unsqueeze(1), 2 ** model_config.depth)
            optimizer.zero_grad()
            prob = model(x)
            loss = jaccard_loss(prob, y_pad.squeeze(1))
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            steps += 1
        miou = val_miou() if len(val_idx) else float("nan")
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_miou": miou, "steps": steps})
        log.info("epoch %d: train_loss=%.4f val_miou=%.4f", epoch,
                 history[-1]["train_loss"], miou)
        if not len(val_idx) or miou >= best:
            best = miou if len(val_idx) else 0.0
            torch.save({"state_dict": model.state_dict(),
                        "model_config": asdict(model_config),
                        "train_config": asdict(train_config),
                        "use_flow": use_flow,
                        "epoch": epoch,
                        "val_miou": miou}, ckpt_path)

    with (out_dir / "history.jsonl").open("w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return ckpt_path, history


def load_checkpoint(path: str | Path) -> tuple[RailNet, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    config = ModelConfig(**blob["model_config"])
    model = RailNet(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob


def predict(checkpoint: str | Path | RailNet, image: np.ndarray,
            flow: FlowField | None = None, threshold: float = 0.5) -> np.ndarray:
    """Binary railway mask from a trained model.

    The checkpoint's channel count must match flow presence: a 5-channel
    model requires flow, a 3-channel model rejects it.
    """
    model = checkpoint if isinstance(checkpoint, RailNet) else load_checkpoint(checkpoint)[0]
    expected = 5 if flow is not None else 3
    if model.config.in_channels != expected:
        raise ValidationError(
            f"model expects {model.config.in_channels} channels but "
            f"{'flow was supplied' if flow is not None else 'no flow was supplied'}")
    prob = forward(model, fuse_inputs(image, flow))
    return (prob >= threshold).astype(np.uint8)
