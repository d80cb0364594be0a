"""Dice+CE loss, global-norm gradient clipping, Adam, and the training loop.

The loop is deterministic under ``TrainConfig.seed``: case order, crop
offsets and flips all derive from one generator.  Every step records
(step, epoch, loss, grad_norm); non-finite losses abort, non-finite
gradients skip the optimizer step and are reported in the curve as a NaN
gradient norm.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .pipeline import Volume, one_hot_labels, random_crop
from .network import save_checkpoint

log = logging.getLogger(__name__)


class NonFiniteGradientError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimization protocol. Defaults follow the LKA recipe (lr 1e-4,
    clip 1.0); the plain baseline uses lr 2e-4 and clip 12.0."""

    lr: float = 1e-4
    batch_size: int = 2
    epochs: int = 1
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    crop_size: tuple = None  # None trains on whole volumes
    flips: bool = True
    include_background: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.crop_size is not None:
            object.__setattr__(self, "crop_size", tuple(int(s) for s in self.crop_size))


def dice_ce_loss(logits, target, include_background=True, eps=1e-5):
    """Soft Dice (per batch item and class, then averaged) plus mean CE.

    ``target`` is one-hot, same shape as ``logits``; both terms use the
    softmax over the class axis.  Dice smoothing ε avoids 0/0 on classes
    empty in both prediction and target.
    """
    target_data = target.data if isinstance(target, T.Tensor) else np.asarray(target)
    if tuple(target_data.shape) != tuple(logits.shape):
        raise ValueError(f"target shape {target_data.shape} != logits shape {tuple(logits.shape)}")
    if logits.shape[1] < 2:
        raise ValueError("need at least 2 classes")
    t = T.Tensor(target_data.astype(logits.dtype, copy=False))

    shift = logits.data.max(axis=1, keepdims=True)  # constant: softmax is shift-invariant
    z = T.sub(logits, T.Tensor(shift))
    lse = T.log(T.tensor_sum(T.exp(z), axis=1, keepdims=True))
    logp = T.sub(z, lse)
    p = T.exp(logp)

    n, k = logits.shape[:2]
    voxels = int(np.prod(logits.shape[2:]))
    ce = T.mul(T.tensor_sum(T.mul(t, logp)), -1.0 / (n * voxels))

    spatial = (2, 3, 4)
    inter = T.tensor_sum(T.mul(p, t), axis=spatial)
    denom = T.add(T.tensor_sum(p, axis=spatial), T.tensor_sum(t, axis=spatial))
    dice = T.div(T.add(T.mul(inter, 2.0), eps), T.add(denom, eps))
    if not include_background:
        dice = dice[:, 1:]
    dice_loss = T.sub(1.0, T.tensor_mean(dice))
    return T.add(dice_loss, ce)


def clip_grad_norm(params, max_norm):
    """Scale all gradients so the global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.  Raises NonFiniteGradientError when any
    gradient contains NaN/Inf (the caller skips the step).
    """
    total = 0.0
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        s = float(np.dot(g.reshape(-1), g.reshape(-1)))
        if not np.isfinite(s):
            raise NonFiniteGradientError("non-finite gradient encountered")
        total += s
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Adam:
    """Standard Adam with bias correction over a fixed parameter list."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = 0.0
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self):
        out = {"adam/t": np.array([self.t], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam/m/{i}"] = m
            out[f"adam/v/{i}"] = v
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["adam/t"][0])
        for i in range(len(self.params)):
            self.m[i] = np.asarray(arrays[f"adam/m/{i}"], dtype=self.m[i].dtype).reshape(self.m[i].shape)
            self.v[i] = np.asarray(arrays[f"adam/v/{i}"], dtype=self.v[i].dtype).reshape(self.v[i].shape)


def _assemble_batch(cases, config, rng):
    imgs, lbls = [], []
    for img, lbl in cases:
        if config.crop_size is not None:
            seed = int(rng.integers(0, 2 ** 31))
            img, lbl = random_crop(img, lbl, config.crop_size, seed, flips=config.flips)
        imgs.append(img.data.astype(np.float32, copy=False))
        lbls.append(lbl.data[0])
    return np.stack(imgs), np.stack(lbls).astype(np.int64)


def train(model, dataset, config: TrainConfig, out_dir=None, max_steps=None,
          optimizer=None, start_step=0, start_epoch=0):
    """Run the training loop; returns history rows (step, epoch, loss, grad_norm).

    ``dataset`` is a sequence of (image Volume, label Volume) pairs already
    preprocessed to the model's input channels.  Checkpoints (with optimizer
    state) are written per epoch when ``out_dir`` is given, plus the loss
    curve as ``loss_curve.csv``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    num_classes = model.config.num_classes
    params = model.parameters()
    opt = optimizer or Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    history = []
    step = start_step
    model.train()
    done = False
    for epoch in range(start_epoch, config.epochs):
        order = rng.permutation(len(dataset))
        for b0 in range(0, len(dataset) - config.batch_size + 1, config.batch_size):
            if max_steps is not None and step >= max_steps:
                done = True
                break
            cases = [dataset[i] for i in order[b0:b0 + config.batch_size]]
            x, labels = _assemble_batch(cases, config, rng)
            logits = model(T.Tensor(x))
            loss = dice_ce_loss(logits, one_hot_labels(labels, num_classes),
                                include_background=config.include_background)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(
                    f"non-finite loss {loss_val} at step {step} (epoch {epoch})")
            loss.backward()
            grad_norm = float("nan")
            try:
                grad_norm = clip_grad_norm(params, config.clip_norm)
                opt.step()
            except NonFiniteGradientError:
                log.warning("step %d: non-finite gradient, step skipped", step)
            model.zero_grad()
            history.append((step, epoch, loss_val, grad_norm))
            step += 1
        if out_dir is not None:
            save_checkpoint(model, os.path.join(out_dir, f"ckpt_epoch_{epoch:03d}.lka3d"),
                            extra={"step": step, "epoch": epoch + 1},
                            arrays=opt.state_arrays())
        if done:
            break
    if out_dir is not None:
        save_checkpoint(model, os.path.join(out_dir, "ckpt_final.lka3d"),
                        extra={"step": step, "epoch": config.epochs},
                        arrays=opt.state_arrays())
        write_loss_curve(os.path.join(out_dir, "loss_curve.csv"), history,
                         append=start_step > 0)
    return history


def write_loss_curve(path, history, append=False):
    mode = "a" if append and os.path.exists(path) else "w"
    with open(path, mode, newline="") as f:
        writer = csv.writer(f)
        if mode == "w":
            writer.writerow(["step", "epoch", "loss", "grad_norm"])
        for row in history:
            writer.writerow([row[0], row[1], f"{row[2]:.6f}", f"{row[3]:.6f}"])


def smoothed(values, window):
    """Means of disjoint blocks of ``window`` values (loss-curve smoothing)."""
    values = list(values)
    return [float(np.mean(values[i:i + window]))
            for i in range(0, len(values) - window + 1, window)]
