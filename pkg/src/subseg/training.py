"""Dice loss, stochastic augmentation, patch sampling, and the training loop.

Training optimizes soft Dice with AdamW (decoupled weight decay), samples
96^3 patches from the sliding-window grid with a foreground bias, and logs
line-delimited JSON metrics. Runs are fully seeded and resumable: checkpoints
carry optimizer state and both RNG streams.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import affine_transform, gaussian_filter

from .errors import EmptyDataset, NonFiniteLoss, ShapeMismatch
from .labels import NUM_CLASSES, LabelTable
from .model import HybridSegNet3d, save_checkpoint
from .patches import PatchPlan, extract_patch, plan_patches
from .volume import Volume, crop_to_content

DICE_EPS = 1e-5


@dataclass
class TrainConfig:
    learning_rate: float = 1e-6
    weight_decay: float = 1e-4
    batch_size: int = 2
    max_steps: int = 100
    val_interval: int = 25
    augment_prob: float = 0.2
    rotation_deg: float = 10.0
    scale_min: float = 0.9
    scale_max: float = 1.1
    translation_vox: float = 5.0
    noise_sigma_max: float = 0.05
    blur_sigma_min: float = 0.25
    blur_sigma_max: float = 1.0
    stride: int = 16
    include_background: bool = True
    # small eps: bridge gradients sit around 1e-10 at init and the default
    # 1e-8 silently cuts their effective learning rate ~100x
    adam_eps: float = 1e-12
    stop_loss: float | None = None  # optional early stop for desk-scale overfit runs
    seed: int = 0
    device: str = "cpu"

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ValueError("augment_prob must be in [0, 1]")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.val_interval < 1:
            raise ValueError("val_interval must be >= 1")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be > 0")


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS,
              include_background: bool = True) -> torch.Tensor:
    """Soft Dice loss, averaged over classes.

    1 - mean_c (2 * sum(p_c * g_c) + eps) / (sum(p_c) + sum(g_c) + eps),
    summed over all voxels (and batch). Accepts channel-first tensors
    (C, ...) or batched (B, C, D, H, W), with target one-hot in the same
    shape.
    """
    if probs.shape != target.shape:
        raise ShapeMismatch(f"probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    if probs.ndim == 5:  # batched (B, C, D, H, W): fold batch into voxels
        probs = probs.movedim(1, 0)
        target = target.movedim(1, 0)
    c = probs.shape[0]
    p = probs.reshape(c, -1)
    g = target.reshape(c, -1)
    inter = (p * g).sum(dim=1)
    denom = p.sum(dim=1) + g.sum(dim=1)
    dice = (2.0 * inter + eps) / (denom + eps)
    if not include_background:
        dice = dice[1:]
    return 1.0 - dice.mean()


def one_hot(class_grid: torch.Tensor, num_classes: int = NUM_CLASSES) -> torch.Tensor:
    """(B, D, H, W) int grid -> (B, C, D, H, W) float32 one-hot."""
    out = torch.zeros((class_grid.shape[0], num_classes, *class_grid.shape[1:]),
                      dtype=torch.float32, device=class_grid.device)
    return out.scatter_(1, class_grid.long().unsqueeze(1), 1.0)


def augment(patch: np.ndarray, label_patch: np.ndarray, rng: np.random.Generator,
            cfg: TrainConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Independently apply affine / noise / blur, each with cfg.augment_prob.

    Affine: rotation within +-rotation_deg per axis, isotropic scale in
    [scale_min, scale_max], translation within +-translation_vox voxels;
    trilinear for intensity, nearest for labels. Noise: additive Gaussian,
    sigma uniform in [0, noise_sigma_max]. Blur: Gaussian, sigma uniform in
    [blur_sigma_min, blur_sigma_max], intensity only. Intensity is clipped
    back to [0, 1] at the end.
    """
    cfg = cfg or TrainConfig()
    do_affine = rng.random() < cfg.augment_prob
    do_noise = rng.random() < cfg.augment_prob
    do_blur = rng.random() < cfg.augment_prob
    if not (do_affine or do_noise or do_blur):
        return patch, label_patch

    if do_affine:
        angles = np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg, size=3))
        scale = rng.uniform(cfg.scale_min, cfg.scale_max)
        shift = rng.uniform(-cfg.translation_vox, cfg.translation_vox, size=3)
        cx, cy, cz = np.cos(angles)
        sx, sy, sz = np.sin(angles)
        rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        mat = (rx @ ry @ rz) * scale
        center = (np.array(patch.shape) - 1) / 2.0
        offset = center + shift - mat @ center
        patch = affine_transform(patch.astype(np.float64), mat, offset=offset, order=1,
                                 mode="constant", cval=0.0)
        label_patch = affine_transform(label_patch, mat, offset=offset, order=0,
                                       mode="constant", cval=0)
    if do_noise:
        sigma = rng.uniform(0.0, cfg.noise_sigma_max)
        patch = patch + rng.normal(0.0, sigma, size=patch.shape)
    if do_blur:
        sigma = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max)
        patch = gaussian_filter(patch.astype(np.float64), sigma)

    return np.clip(patch, 0.0, 1.0), label_patch


def sample_training_patch(intensity: np.ndarray, labels: np.ndarray, plan: PatchPlan,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform draw from the patch grid, foreground-biased half the time.

    With probability 0.5 the draw is repeated until the label window contains
    foreground; volumes with no foreground fall back to the plain draw.
    """
    offsets = plan.offsets
    offset = offsets[rng.integers(len(offsets))]
    if rng.random() < 0.5 and (labels != 0).any():
        while not (extract_patch(labels, offset) != 0).any():
            offset = offsets[rng.integers(len(offsets))]
    return extract_patch(intensity, offset), extract_patch(labels, offset)


@dataclass
class TrainingCase:
    """Cropped, class-indexed pair ready for patch sampling."""

    intensity: np.ndarray  # crop-frame float grid in [0, 1]
    class_labels: np.ndarray  # crop-frame class indices 0..31
    plan: PatchPlan
    case_id: str = ""


def prepare_case(intensity: Volume, labels: Volume, table: LabelTable,
                 stride: int = 16, case_id: str = "") -> TrainingCase:
    crop, frame = crop_to_content(intensity)
    label_crop = labels.data[frame.slices]
    if labels.label_codomain == "class_index":
        class_crop = label_crop.astype(np.int16)
    else:
        class_crop = table.map_fs_to_classes(label_crop)
    return TrainingCase(
        intensity=crop.astype(np.float32),
        class_labels=class_crop,
        plan=plan_patches(frame.dims, stride=stride),
        case_id=case_id,
    )


@dataclass
class TrainResult:
    steps: int
    log_path: Path
    last_checkpoint: Path
    best_checkpoint: Path | None
    best_val_dsc: float | None
    final_loss: float | None = None
    losses: list[float] = field(default_factory=list)


def _validation_dsc(model: HybridSegNet3d, cases: list[TrainingCase], device: str) -> float | None:
    """Mean hard DSC on each case's center patch, uniform over present classes."""
    if not cases:
        return None
    model.eval()
    scores = []
    with torch.no_grad():
        for case in cases:
            offset = case.plan.offsets[len(case.plan.offsets) // 2]
            patch = extract_patch(case.intensity, offset)
            target = extract_patch(case.class_labels, offset)
            t = torch.from_numpy(patch).float().unsqueeze(0).unsqueeze(0).to(device)
            pred = model(t)[0].argmax(dim=0).cpu().numpy()
            per_class = []
            for c in np.unique(target):
                a = pred == c
                b = target == c
                per_class.append(2.0 * np.logical_and(a, b).sum() / (a.sum() + b.sum()))
            scores.append(float(np.mean(per_class)))
    model.train()
    return float(np.mean(scores))


def _rng_payload(rng: np.random.Generator) -> dict:
    return {
        "numpy_rng_state": rng.bit_generator.state,
        "torch_rng_state": torch.get_rng_state(),
    }


def train(model: HybridSegNet3d, train_cases: list[TrainingCase],
          val_cases: list[TrainingCase], cfg: TrainConfig, out_dir,
          table: LabelTable | None = None, resume_from=None) -> TrainResult:
    """Seeded optimization loop with per-step loss logging and checkpointing.

    Writes metrics.jsonl (step, loss, val_dsc, wall_time) plus last.pt every
    validation interval and best.pt on validation improvement. Resuming from
    a checkpoint replays the exact trajectory of an uninterrupted run.
    """
    cfg.validate()
    if not train_cases:
        raise EmptyDataset("training requires at least one case")
    table = table or LabelTable.default()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.jsonl"
    last_path = out_dir / "last.pt"
    best_path = out_dir / "best.pt"

    device = cfg.device
    model = model.to(device)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                                  weight_decay=cfg.weight_decay, eps=cfg.adam_eps)

    start_step = 0
    best_val = None
    if resume_from is not None:
        payload = torch.load(resume_from, map_location=device, weights_only=False)
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        start_step = payload["step"]
        best_val = payload.get("best_val_dsc")
        rng = np.random.default_rng()
        rng.bit_generator.state = payload["numpy_rng_state"]
        torch.set_rng_state(payload["torch_rng_state"])
        log_mode = "a"
    else:
        rng = np.random.default_rng(cfg.seed)
        torch.manual_seed(cfg.seed)
        log_mode = "w"

    def write_ckpt(path, step, val):
        save_checkpoint(
            path, model, table,
            optimizer_state=optimizer.state_dict(), step=step,
            best_val_dsc=val, train_config=asdict(cfg), **_rng_payload(rng),
        )

    losses: list[float] = []
    t0 = time.perf_counter()
    saved_best = False
    with open(log_path, log_mode) as log:
        if cfg.max_steps == 0:
            write_ckpt(last_path, 0, best_val)
            return TrainResult(0, log_path, last_path, None, best_val)

        model.train()
        stopped = False
        for step in range(start_step + 1, cfg.max_steps + 1):
            xs, ys = [], []
            for _ in range(cfg.batch_size):
                case = train_cases[rng.integers(len(train_cases))]
                patch, label_patch = sample_training_patch(
                    case.intensity, case.class_labels, case.plan, rng)
                patch, label_patch = augment(patch, label_patch, rng, cfg)
                xs.append(torch.from_numpy(np.ascontiguousarray(patch, dtype=np.float32)))
                ys.append(torch.from_numpy(np.ascontiguousarray(label_patch, dtype=np.int64)))
            x = torch.stack(xs).unsqueeze(1).to(device)
            y = one_hot(torch.stack(ys).to(device))

            optimizer.zero_grad()
            probs = model(x)
            loss = dice_loss(probs, y, include_background=cfg.include_background)
            loss_val = float(loss.detach())
            if not np.isfinite(loss_val):
                raise NonFiniteLoss(f"loss became {loss_val} at step {step} (lr={cfg.learning_rate})")
            loss.backward()
            optimizer.step()
            losses.append(loss_val)

            val_dsc = None
            if step % cfg.val_interval == 0 or step == cfg.max_steps:
                val_dsc = _validation_dsc(model, val_cases, device)
                if val_dsc is not None and (best_val is None or val_dsc > best_val):
                    best_val = val_dsc
                    write_ckpt(best_path, step, best_val)
                    saved_best = True
                write_ckpt(last_path, step, best_val)

            log.write(json.dumps({
                "step": step,
                "loss": loss_val,
                "val_dsc": val_dsc,
                "wall_time": time.perf_counter() - t0,
            }) + "\n")
            log.flush()

            if cfg.stop_loss is not None and loss_val < cfg.stop_loss:
                stopped = True
                write_ckpt(last_path, step, best_val)
                break

        if not stopped:
            write_ckpt(last_path, cfg.max_steps, best_val)

    return TrainResult(
        steps=len(losses) + start_step,
        log_path=log_path,
        last_checkpoint=last_path,
        best_checkpoint=best_path if saved_best else None,
        best_val_dsc=best_val,
        final_loss=losses[-1] if losses else None,
        losses=losses,
    )
