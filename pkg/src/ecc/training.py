"""Bi-directional training of the correction network.

Each iteration draws in-set (input, target) patch pairs and runs two
chained passes on one tape: the forward pass corrects the input toward
the target gaze and is scored against the target patch; the return pass
re-corrects that output back toward the input gaze and is scored against
the input patch. The second term is what pins the flow field down: a
model that fakes the target appearance without a coherent warp cannot
undo itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Tape, Tensor
from .eccw import save_weights
from .model import EccNet, apply_correction
from .synthdata import augment, make_pairs, sample_aug


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 16
    lr_min: float = 0.002
    lr_max: float = 0.01
    lr_cycle: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 0.1
    correction_weight: float = 0.8
    reconstruction_weight: float = 0.2
    seed: int = 0
    augment: bool = True
    finetune: bool = False
    log_every: int = 100
    checkpoint_every: int = 2000

    def __post_init__(self):
        if self.iterations <= 0 or self.batch_size <= 0:
            raise ValueError("iterations and batch_size must be positive")
        if self.lr_min <= 0 or self.lr_max < self.lr_min:
            raise ValueError("need 0 < lr_min <= lr_max")
        if self.lr_cycle <= 0:
            raise ValueError("lr_cycle must be positive")
        if self.correction_weight < 0 or self.reconstruction_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if abs(self.correction_weight + self.reconstruction_weight - 1.0) > 1e-9:
            raise ValueError("loss weights must sum to 1.0")


def cyclic_lr(step: int, cfg: TrainConfig) -> float:
    """Triangular schedule: lr_min -> lr_max -> lr_min over lr_cycle steps."""
    t = (step % cfg.lr_cycle) / cfg.lr_cycle
    tri = 1.0 - abs(2.0 * t - 1.0)
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * tri


class Adam:
    """Adam with the stability term added outside the square root."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=0.1):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class LossReport:
    iteration: int
    lr: float
    loss: float
    correction: float
    reconstruction: float

    def as_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "lr": round(self.lr, 8),
            "loss": self.loss,
            "correction": self.correction,
            "reconstruction": self.reconstruction,
        }


def bidirectional_step(model: EccNet, batch: tuple, cfg: TrainConfig, opt: Adam, lr: float) -> LossReport:
    """One optimization step over (input, gaze_in, target, gaze_tgt)."""
    img_in, gaze_in, img_tgt, gaze_tgt = batch
    training = not cfg.finetune  # finetuning keeps normalization frozen
    x = Tensor(img_in, requires_grad=False)
    tgt = Tensor(img_tgt, requires_grad=False)
    with Tape() as tape:
        flow1, bright1 = model.forward(
            x, gaze_tgt, training=training, update_stats=training
        )
        corrected = apply_correction(x, flow1, bright1)
        loss_c = ops.mse(corrected, tgt)

        flow2, bright2 = model.forward(
            corrected, gaze_in, training=training, update_stats=training
        )
        restored = apply_correction(corrected, flow2, bright2)
        loss_r = ops.mse(restored, x)

        total = ops.add(
            ops.affine(loss_c, cfg.correction_weight),
            ops.affine(loss_r, cfg.reconstruction_weight),
        )
        lc = float(loss_c.item())
        lr_loss = float(loss_r.item())
        lt = float(total.item())
        if not np.isfinite(lt):
            raise TrainingDiverged(f"non-finite loss at step {opt.t + 1}")
        for p in model.params.values():
            p.zero_grad()
        tape.backward(total)
    opt.step(model.trainable(cfg.finetune), lr)
    return LossReport(iteration=opt.t, lr=lr, loss=lt, correction=lc, reconstruction=lr_loss)


def sample_batch(sets: list, cfg: TrainConfig, rng: np.random.Generator) -> tuple:
    """Draw batch_size in-set ordered pairs; optionally augment both sides."""
    n = cfg.batch_size
    img_in = np.empty((n, 3, 32, 64), np.float32)
    img_tgt = np.empty((n, 3, 32, 64), np.float32)
    gaze_in = np.empty((n, 2), np.float32)
    gaze_tgt = np.empty((n, 2), np.float32)
    for b in range(n):
        es = sets[rng.integers(len(sets))]
        k = len(es.samples)
        i = int(rng.integers(k))
        j = int(rng.integers(k - 1))
        if j >= i:
            j += 1
        src, dst = es.samples[i], es.samples[j]
        a = src.image
        t = dst.image
        if cfg.augment:
            # both sides of a pair share their capture conditions; only
            # the sensor-noise realization differs between the frames
            shared = sample_aug(rng)
            a = augment(a, rng, shared)
            t = augment(t, rng, shared)
        img_in[b] = a
        img_tgt[b] = t
        gaze_in[b] = src.gaze
        gaze_tgt[b] = dst.gaze
    return img_in, gaze_in, img_tgt, gaze_tgt


def train(model: EccNet, sets: list, cfg: TrainConfig, out_dir=None, on_report=None) -> list:
    """Run the full loop; returns the list of LossReports.

    Deterministic for a fixed (model seed, cfg.seed, dataset): batches,
    augmentation, and updates all draw from one seeded generator.
    """
    if not sets:
        raise ValueError("empty dataset")
    if any(len(es.samples) < 2 for es in sets):
        raise ValueError("every set needs at least 2 samples to form pairs")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    params = model.trainable(cfg.finetune)
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    history = []
    for it in range(1, cfg.iterations + 1):
        lr = cyclic_lr(it - 1, cfg)
        batch = sample_batch(sets, cfg, rng)
        report = bidirectional_step(model, batch, cfg, opt, lr)
        if it % cfg.log_every == 0 or it == 1 or it == cfg.iterations:
            history.append(report)
            if on_report is not None:
                on_report(report)
        if out_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_weights(f"{out_dir}/ckpt_{it:06d}.eccw", model.weights())
    if out_dir is not None:
        save_weights(f"{out_dir}/final.eccw", model.weights())
    return history


__all__ = [
    "Adam",
    "LossReport",
    "TrainConfig",
    "TrainingDiverged",
    "bidirectional_step",
    "cyclic_lr",
    "sample_batch",
    "train",
]
