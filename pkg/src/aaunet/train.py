"""Training loop: AdamW with decoupled weight decay, triangular cyclic
learning rate, class-weighted focal loss, JSON-lines metrics, best-checkpoint
retention and bit-exact resume.

Determinism: model init is a pure function of the seed, and every step's
batch sampling and augmentation draws come from generators keyed on
(seed, step), so resuming from a checkpoint replays the exact trajectory an
uninterrupted run would have produced.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_model_checkpoint, save_model_checkpoint
from .dataset import AugmentPolicy, augment, load_case, load_manifest
from .errors import ConfigError, NonFiniteGradient, TrainingAborted
from .losses import focal_loss, inverse_frequency_weights
from .metrics import NUM_CLASSES, DiceReport, evaluate
from .model import AllAttentionUNet, ModelConfig


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr_base: float = 1e-4
    lr_max: float = 1e-3
    cycle_length_steps: int = 500
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 4
    max_steps: int = 500
    seed: int = 0
    eval_interval: int = 100
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    weight_clip: float = 10.0
    focal_gamma: float = 2.0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.augment, dict):
            self.augment = AugmentPolicy(**{k: tuple(v) if isinstance(v, list) else v
                                            for k, v in self.augment.items()})
        self.betas = tuple(self.betas)
        if not 0 < self.lr_base <= self.lr_max:
            raise ConfigError(f"TrainConfig: need 0 < lr_base <= lr_max, got {self.lr_base}/{self.lr_max}")
        if self.cycle_length_steps < 2:
            raise ConfigError(f"TrainConfig: cycle_length_steps must be >= 2, got {self.cycle_length_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"TrainConfig: batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def cyclic_lr(step, lr_base, lr_max, cycle_length):
    """Triangular schedule: base -> max over the first half cycle, back down
    over the second; periodic with period ``cycle_length``."""
    if step < 0:
        raise ConfigError(f"cyclic_lr: step must be >= 0, got {step}")
    pos = step % cycle_length
    half = cycle_length / 2.0
    frac = pos / half if pos <= half else 2.0 - pos / half
    return lr_base + (lr_max - lr_base) * frac


class AdamWState:
    """First/second moments per parameter plus the shared step counter."""

    def __init__(self, named_params=None):
        self.step = 0
        self.moments = {}
        if named_params is not None:
            for name, p in named_params:
                self.moments[name] = (torch.zeros_like(p, requires_grad=False),
                                      torch.zeros_like(p, requires_grad=False))


def adamw_step(params, grads, state: AdamWState, lr, betas=(0.9, 0.999),
               eps=1e-8, weight_decay=0.0):
    """One AdamW update over ``params`` (name -> tensor) given matching grads.

    Weight decay is decoupled: p <- p - lr * wd * p, applied separately from
    the bias-corrected moment update m_hat / (sqrt(v_hat) + eps).
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for parameter '{name}'")
    b1, b2 = betas
    t = state.step + 1
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m, v = state.moments[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    state.step = t


class SliceBank:
    """All slices of one split held in memory, with case-local neighbor
    indices so 3-slice stacks never cross patient boundaries."""

    def __init__(self, images, masks, neighbors):
        self.images = images
        self.masks = masks
        self.neighbors = neighbors

    @classmethod
    def from_manifest(cls, root, manifest, split):
        root = Path(root)
        images, masks, neighbors = [], [], []
        for mc in manifest.split_cases(split):
            case = load_case(root / "cases" / mc.patient_id)
            base = len(images)
            n = case.n_slices
            for i in range(n):
                images.append(case.images[i])
                masks.append(case.masks[i])
                neighbors.append((base + max(i - 1, 0), base + i, base + min(i + 1, n - 1)))
        if not images:
            return cls(np.zeros((0, 1, 1), np.float32), np.zeros((0, 1, 1), np.uint8),
                       np.zeros((0, 3), np.int64))
        return cls(np.stack(images), np.stack(masks), np.asarray(neighbors, dtype=np.int64))

    def __len__(self):
        return len(self.images)

    def stack(self, i):
        lo, mid, hi = self.neighbors[i]
        return np.stack([self.images[lo], self.images[mid], self.images[hi]]), self.masks[mid]

    def iter_stacks(self):
        for i in range(len(self)):
            yield self.stack(i)


@dataclass
class TrainResult:
    final_step: int
    best_val_mean_dice: float | None
    best_checkpoint: str | None
    last_checkpoint: str
    metrics_path: str
    model: AllAttentionUNet
    class_weights: np.ndarray


def _train_state(cfg, state, step, best):
    return {
        "step": step,
        "adam_t": state.step,
        "best_val_mean_dice": best,
        "train_config": cfg.to_dict(),
        "moments": state.moments,
    }


def train(cfg: TrainConfig, data_root, out_dir, resume_from=None) -> TrainResult:
    """Run the §-free recipe: sample, augment, forward, focal loss, AdamW with
    cyclic LR; JSONL metrics; periodic val evaluation keeping the best
    checkpoint.  Aborts (keeping the last good checkpoint) on non-finite loss."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(data_root)
    train_bank = SliceBank.from_manifest(data_root, manifest, "train")
    val_bank = SliceBank.from_manifest(data_root, manifest, "val")
    if len(train_bank) == 0:
        raise ConfigError("train: empty train split")
    n_train_classes = len(np.unique(train_bank.masks))
    if n_train_classes < 2:
        raise ConfigError(f"train: train split covers {n_train_classes} classes, need >= 2")
    weights = inverse_frequency_weights([train_bank.masks], NUM_CLASSES, clip=cfg.weight_clip)

    start_step = 0
    best = None
    if resume_from is not None:
        model, header, tensors = load_model_checkpoint(resume_from)
        tr = header.get("train")
        if tr is None:
            raise ConfigError(f"checkpoint {resume_from} has no training state to resume from")
        state = AdamWState(model.named_parameters())
        for name in state.moments:
            state.moments[name] = (torch.from_numpy(tensors[f"adam_m.{name}"].copy()),
                                   torch.from_numpy(tensors[f"adam_v.{name}"].copy()))
        state.step = tr["adam_t"]
        start_step = tr["step"]
        best = tr.get("best_val_mean_dice")
    else:
        model = AllAttentionUNet(cfg.model, seed=cfg.seed)
        state = AdamWState(model.named_parameters())

    params = dict(model.named_parameters())
    metrics_path = out_dir / "metrics.jsonl"
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    mode = "a" if resume_from is not None else "w"

    with open(metrics_path, mode, encoding="utf-8") as log:
        for step in range(start_step, cfg.max_steps):
            lr = cyclic_lr(step, cfg.lr_base, cfg.lr_max, cfg.cycle_length_steps)
            batch_rng = np.random.default_rng([cfg.seed, 7, step])
            idx = batch_rng.integers(0, len(train_bank), size=cfg.batch_size)
            xs, ys = [], []
            for k, i in enumerate(idx):
                stack, mask = train_bank.stack(int(i))
                stack, mask = augment(stack, mask, [cfg.seed, 11, step, k], cfg.augment)
                xs.append(stack)
                ys.append(mask)
            x = torch.from_numpy(np.stack(xs))
            y = torch.from_numpy(np.stack(ys).astype(np.int64))

            model.train()
            logits = model(x)
            loss = focal_loss(logits, y, weights, cfg.focal_gamma)
            if not torch.isfinite(loss):
                save_model_checkpoint(last_path, model, _train_state(cfg, state, step, best))
                raise TrainingAborted(
                    f"non-finite loss at step {step}; last good checkpoint kept at {last_path}",
                    last_checkpoint=str(last_path),
                )
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {name: p.grad for name, p in params.items()}
            try:
                adamw_step(params, grads, state, lr, cfg.betas, cfg.eps, cfg.weight_decay)
            except NonFiniteGradient as exc:
                save_model_checkpoint(last_path, model, _train_state(cfg, state, step, best))
                raise TrainingAborted(
                    f"{exc} at step {step}; last good checkpoint kept at {last_path}",
                    last_checkpoint=str(last_path),
                ) from exc
            log.write(json.dumps({"step": step, "lr": lr, "loss": float(loss.item())}) + "\n")

            done = step + 1 == cfg.max_steps
            if (step + 1) % cfg.eval_interval == 0 or done:
                if len(val_bank) > 0:
                    report = evaluate(model, val_bank.iter_stacks())
                    mean = report.mean_dice()
                    log.write(json.dumps({
                        "step": step, "split": "val",
                        "per_class_dice": report.per_class, "mean_dice": mean,
                    }) + "\n")
                    if mean is not None and (best is None or mean > best):
                        best = mean
                        save_model_checkpoint(best_path, model,
                                              _train_state(cfg, state, step + 1, best))
                save_model_checkpoint(last_path, model, _train_state(cfg, state, step + 1, best))

    if start_step >= cfg.max_steps or not last_path.exists():
        save_model_checkpoint(last_path, model, _train_state(cfg, state, cfg.max_steps, best))
    return TrainResult(
        final_step=cfg.max_steps,
        best_val_mean_dice=best,
        best_checkpoint=str(best_path) if best_path.exists() else None,
        last_checkpoint=str(last_path),
        metrics_path=str(metrics_path),
        model=model,
        class_weights=weights,
    )


def evaluate_on_split(model, data_root, split, config_echo=None) -> DiceReport:
    manifest = load_manifest(data_root)
    bank = SliceBank.from_manifest(data_root, manifest, split)
    if len(bank) == 0:
        raise ConfigError(f"evaluate_on_split: split '{split}' is empty")
    return evaluate(model, bank.iter_stacks(), config_echo=config_echo)
