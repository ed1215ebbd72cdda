"""Cross-modal distillation: optical teacher masks supervise the SAR student through Dice loss."""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, DivergenceDetected, EmptyDataset, ShapeMismatch
from .raster import MAX_CLOUD_FRACTION, TilePair
from .teacher import IndexSpec, teacher_mask
from .unet import ModelCheckpoint, UNetConfig, apply_unet, init_model, probabilities, save_checkpoint

log = logging.getLogger(__name__)

# Hyperparameter ranges swept when tuning on the validation split.
LR_GRID = (1e-6, 5e-6, 1e-5, 5e-5, 5e-4, 1e-3, 5e-3)
BATCH_GRID = (1, 2, 4, 8, 16, 32, 64, 128, 256)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 32
    epochs: int = 20
    epsilon: float = 1e-6  # Dice smoothing constant
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    index_spec: IndexSpec = field(default_factory=IndexSpec)
    convergence_tol: float | None = None  # stop once |delta val loss| < tol

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    seconds: float = 0.0
    checkpoint_path: str | None = None
    n_train: int = 0
    n_val: int = 0
    steps: int = 0
    loss_reduction: str = "per_sample_mean"

    def to_json(self, include_timing: bool = False) -> str:
        """Report as JSON; wall time is left out by default so reruns compare byte-equal."""
        doc = asdict(self)
        if not include_timing:
            del doc["seconds"]
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def curve_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss"]
        for e, tr in enumerate(self.train_loss):
            va = repr(self.val_loss[e]) if e < len(self.val_loss) else ""
            rows.append(f"{e + 1},{tr!r},{va}")
        return "\n".join(rows) + "\n"


# ------------------------------------------------------------------ dice loss


def dice_loss(y_t, y_s, epsilon: float = 1e-6) -> float:
    """1 - (2*sum(y_t*y_s) + eps) / (sum(y_t) + sum(y_s) + eps)."""
    y_t = np.asarray(y_t, dtype=np.float64)
    y_s = np.asarray(y_s, dtype=np.float64)
    if y_t.shape != y_s.shape:
        raise ShapeMismatch(f"teacher {y_t.shape} vs student {y_s.shape}")
    inter = (y_t * y_s).sum()
    return float(1.0 - (2.0 * inter + epsilon) / (y_t.sum() + y_s.sum() + epsilon))


def dice_loss_grad(y_t, y_s, epsilon: float = 1e-6) -> np.ndarray:
    """Gradient of :func:`dice_loss` with respect to the student output."""
    y_t = np.asarray(y_t, dtype=np.float64)
    y_s = np.asarray(y_s, dtype=np.float64)
    if y_t.shape != y_s.shape:
        raise ShapeMismatch(f"teacher {y_t.shape} vs student {y_s.shape}")
    num = 2.0 * (y_t * y_s).sum() + epsilon
    den = y_t.sum() + y_s.sum() + epsilon
    return -(2.0 * y_t * den - num) / den**2


def dice_loss_batch(y_t: torch.Tensor, y_s: torch.Tensor, epsilon: float = 1e-6) -> torch.Tensor:
    """Per-sample Dice loss averaged over the batch (tensors shaped (n, ...))."""
    dims = tuple(range(1, y_s.ndim))
    num = 2.0 * (y_t * y_s).sum(dim=dims) + epsilon
    den = y_t.sum(dim=dims) + y_s.sum(dim=dims) + epsilon
    return (1.0 - num / den).mean()


# ------------------------------------------------------------------ optimizer


class Adam:
    """Adaptive-moment descent on a flat parameter array (numpy or torch)."""

    def __init__(self, lr=5e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, w, g):
        """Return the updated parameters for gradient ``g``."""
        if self.m is None:
            self.m = g * 0
            self.v = g * 0
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return w - self.lr * m_hat / (v_hat**0.5 + self.eps)


# ------------------------------------------------------------------- training


def filter_training_pairs(candidates: Sequence[TilePair]) -> list[TilePair]:
    """Keep cloud-free (<= 1 %) pairs with no missing optical or SAR pixels."""
    return [p for p in candidates if p.cloud_fraction <= MAX_CLOUD_FRACTION and p.fully_valid]


def stack_inputs(pairs: Sequence[TilePair]) -> np.ndarray:
    return np.stack([p.sar.data for p in pairs]).astype(np.float32)


def teacher_targets(pairs: Sequence[TilePair], spec: IndexSpec) -> np.ndarray:
    """Teacher masks as float targets; a cached ``teacher`` mask on the pair is reused."""
    masks = [p.masks["teacher"] if "teacher" in p.masks else teacher_mask(p.optical, spec) for p in pairs]
    return np.stack([m.values[None] for m in masks]).astype(np.float32)


def evaluate_loss(w: torch.Tensor, x: np.ndarray, y: np.ndarray, config: UNetConfig, cfg: TrainConfig) -> float:
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(x), cfg.batch_size):
            xb, yb = torch.from_numpy(x[i : i + cfg.batch_size]), torch.from_numpy(y[i : i + cfg.batch_size])
            total += float(dice_loss_batch(yb, probabilities(apply_unet(w, xb, config)), cfg.epsilon)) * len(xb)
    return total / len(x)


def train(
    pairs: Sequence[TilePair],
    unet_config: UNetConfig = UNetConfig(),
    config: TrainConfig = TrainConfig(),
    checkpoint_path=None,
    init: ModelCheckpoint | None = None,
    threads: int | None = None,
    on_epoch: Callable[[int, float, float | None], None] | None = None,
) -> tuple[TrainReport, ModelCheckpoint]:
    """Fit the student to teacher masks with minibatch Adam on the Dice loss.

    Pairs marked ``train`` are fitted, pairs marked ``val`` are scored after
    every epoch. Batch order per epoch is a permutation seeded with
    ``seed + epoch``, so a fixed seed and thread count reproduce the run.
    """
    if threads is not None:
        torch.set_num_threads(threads)
    start = time.perf_counter()
    clean = filter_training_pairs(pairs)
    tr = [p for p in clean if p.split == "train"]
    va = [p for p in clean if p.split == "val"]
    if not tr:
        raise EmptyDataset("no usable training pairs after filtering")
    x_tr, y_tr = stack_inputs(tr), teacher_targets(tr, config.index_spec)
    x_va, y_va = (stack_inputs(va), teacher_targets(va, config.index_spec)) if va else (None, None)

    model = init if init is not None else init_model(unet_config, config.seed)
    unet_config = model.config
    w = torch.from_numpy(model.parameters.copy())
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    report = TrainReport(n_train=len(tr), n_val=len(va))
    history = list(model.loss_history)

    for epoch in range(config.epochs):
        order = np.random.default_rng(config.seed + epoch).permutation(len(tr))
        running = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = np.sort(order[i : i + config.batch_size])
            xb, yb = torch.from_numpy(x_tr[idx]), torch.from_numpy(y_tr[idx])
            w.requires_grad_(True)
            loss = dice_loss_batch(yb, probabilities(apply_unet(w, xb, unet_config)), config.epsilon)
            (grad,) = torch.autograd.grad(loss, w)
            with torch.no_grad():
                w = opt.step(w.detach(), grad)
            running += loss.item() * len(idx)
            report.steps += 1
        train_loss = running / len(tr)
        val_loss = evaluate_loss(w, x_va, y_va, unet_config, config) if va else None
        if not math.isfinite(train_loss) or (val_loss is not None and not math.isfinite(val_loss)):
            raise DivergenceDetected(f"loss became non-finite in epoch {epoch + 1}", epoch=epoch + 1)
        report.train_loss.append(train_loss)
        if val_loss is not None:
            report.val_loss.append(val_loss)
        history.append(train_loss)
        log.info(json.dumps({"stage": "train", "epoch": epoch + 1, "train_loss": train_loss, "val_loss": val_loss}))
        if on_epoch:
            on_epoch(epoch + 1, train_loss, val_loss)
        if (
            config.convergence_tol is not None
            and len(report.val_loss) >= 2
            and abs(report.val_loss[-1] - report.val_loss[-2]) < config.convergence_tol
        ):
            break

    checkpoint = ModelCheckpoint(
        unet_config,
        w.detach().numpy(),
        model.seed,
        model.trained_epochs + len(report.train_loss),
        history,
    )
    if checkpoint_path is not None:
        save_checkpoint(checkpoint, checkpoint_path)
        report.checkpoint_path = str(checkpoint_path)
    report.seconds = time.perf_counter() - start
    return report, checkpoint


def grid_search(
    pairs: Sequence[TilePair],
    unet_config: UNetConfig = UNetConfig(),
    base: TrainConfig = TrainConfig(),
    learning_rates: Sequence[float] = LR_GRID,
    batch_sizes: Sequence[int] = BATCH_GRID,
) -> list[dict]:
    """Train once per (learning rate, batch size); rows sorted by final validation loss."""
    rows = []
    for lr, bs in itertools.product(learning_rates, batch_sizes):
        report, _ = train(pairs, unet_config, replace(base, learning_rate=lr, batch_size=bs))
        final = report.val_loss[-1] if report.val_loss else report.train_loss[-1]
        rows.append({"learning_rate": lr, "batch_size": bs, "final_loss": final})
    return sorted(rows, key=lambda r: r["final_loss"])
