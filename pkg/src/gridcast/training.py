"""Sequence-to-sequence training on occupancy episodes.

One sample = a random (context, future) window from an episode: the model
sees N frames, extrapolates P more closed-loop, and the L1 error over the
predicted frames backpropagates through the whole unrolled graph. Gradients
accumulate over a small batch of samples, get globally norm-clipped, and
feed a from-scratch Adam update.

Divergence is fatal by design: a non-finite loss aborts with a diagnostic
checkpoint rather than silently training on garbage.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

import gridcast.tensor as gt
from gridcast.tensor import GridcastError, ShapeError, Tensor
from gridcast.prednet import save_checkpoint

__all__ = [
    "TrainConfig", "TrainResult", "TrainingDiverged", "Adam",
    "l1_sequence_loss", "clip_gradients", "train",
    "loss_curve_text", "parse_loss_curve",
]


class TrainingDiverged(GridcastError):
    """Loss went non-finite; the optimizer state is not trustworthy."""


@dataclass
class TrainConfig:
    n_context: int = 5
    pred_len: int = 15
    epochs: int = 200
    samples_per_epoch: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    batch_size: int = 4
    clip_norm: float = 1.0
    # stop once epoch loss falls to this fraction of the first epoch
    target_ratio: float | None = None
    # cut gradient flow every k unrolled steps; None = full backprop
    truncate_every: int | None = None

    def validate(self) -> None:
        if self.n_context < 1 or self.pred_len < 1:
            raise ShapeError("need at least one context and one predicted "
                             "frame")
        if self.epochs < 1 or self.samples_per_epoch < 1 \
                or self.batch_size < 1:
            raise ShapeError("epochs, samples and batch size must be >= 1")
        if self.lr < 0 or self.clip_norm <= 0:
            raise ShapeError("need lr >= 0 and a positive clip norm")
        if self.truncate_every is not None and self.truncate_every < 1:
            raise ShapeError("truncation interval must be >= 1")

    def as_manifest(self) -> dict:
        return dataclasses.asdict(self)


def l1_sequence_loss(preds, targets) -> Tensor:
    """Mean absolute error over predicted frames, channels and cells."""
    if isinstance(preds, (list, tuple)):
        preds = gt.stack(list(preds))
    if not isinstance(targets, Tensor):
        targets = Tensor(np.asarray(targets, dtype=preds.data.dtype))
    if preds.shape != targets.shape:
        raise ShapeError(
            f"prediction shape {preds.shape} != target {targets.shape}")
    return gt.mean_(gt.abs_(preds - targets))


class Adam:
    """Bias-corrected adaptive moments, the standard update rule."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_gradients(grads: dict[str, np.ndarray],
                   max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm.

    Returns the pre-clip global norm. Mutates the arrays in place.
    """
    total = math.fsum(float(np.sum(np.square(g))) for g in grads.values())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def _detach_tree(obj):
    """Copy a state structure with every tensor cut from the graph."""
    if isinstance(obj, Tensor):
        return obj.detach()
    if isinstance(obj, list):
        return [_detach_tree(x) for x in obj]
    if isinstance(obj, tuple):
        return tuple(_detach_tree(x) for x in obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return dataclasses.replace(obj, **{
            f.name: _detach_tree(getattr(obj, f.name))
            for f in dataclasses.fields(obj)})
    return obj


def _unroll(model, frames: np.ndarray, pred_len: int,
            truncate_every: int | None):
    """Model rollout, optionally cutting gradient flow every k steps."""
    if truncate_every is None:
        return model.rollout(frames, pred_len)
    stacked = hasattr(model, "init_states")  # top-down stack vs single chain
    state = model.init_states() if stacked else model.init_state()
    steps = 0

    def cut(s):
        nonlocal steps
        steps += 1
        return _detach_tree(s) if steps % truncate_every == 0 else s

    out = None
    for t in range(len(frames)):
        out, state = model.step(Tensor(np.asarray(frames[t],
                                                  dtype=model.dtype)), state)
        state = cut(state)
    preds = [] if stacked else [out]
    feed = out
    while len(preds) < pred_len:
        out, state = model.step(feed, state)
        preds.append(out)
        state = cut(state)
        feed = out if steps % truncate_every else out.detach()
    return preds


@dataclass
class TrainResult:
    losses: list[float]
    best_epoch: int       # 1-based
    best_loss: float
    checkpoint_path: str | None = None

    def curve_text(self) -> str:
        return loss_curve_text(self.losses)


def loss_curve_text(losses) -> str:
    lines = ["# epoch loss"]
    lines += [f"{i + 1} {v:.8g}" for i, v in enumerate(losses)]
    return "\n".join(lines) + "\n"


def parse_loss_curve(text: str) -> list[float]:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GridcastError(f"bad loss curve line: {line!r}")
        out.append(float(parts[1]))
    return out


def _draw_window(episodes, cfg: TrainConfig, rng: np.random.Generator):
    ep = episodes[int(rng.integers(len(episodes)))]
    span = cfg.n_context + cfg.pred_len
    start = int(rng.integers(ep.length - span + 1))
    window = ep.masses[start:start + span].astype(np.float64)
    return window[:cfg.n_context], window[cfg.n_context:]


def train(model, episodes, cfg: TrainConfig,
          ckpt_path=None, log=None) -> TrainResult:
    """Optimize the model in place; returns the per-epoch loss curve.

    The best-epoch parameters go to ``ckpt_path`` when given. A non-finite
    loss raises TrainingDiverged after writing ``<ckpt_path>.diverged`` for
    post-mortem inspection.
    """
    cfg.validate()
    episodes = list(episodes)
    if not episodes:
        raise GridcastError("no training episodes")
    span = cfg.n_context + cfg.pred_len
    for ep in episodes:
        if ep.length < span:
            raise GridcastError(
                f"episode length {ep.length} < window {span}")
    rng = np.random.default_rng(cfg.seed)
    params = model.named()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    losses: list[float] = []
    best_loss = math.inf
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        loss_sum = 0.0
        drawn = 0
        while drawn < cfg.samples_per_epoch:
            batch = min(cfg.batch_size, cfg.samples_per_epoch - drawn)
            acc: dict[str, np.ndarray] = {}
            for _ in range(batch):
                frames, targets = _draw_window(episodes, cfg, rng)
                with gt.Tape() as tape:
                    preds = _unroll(model, frames, cfg.pred_len,
                                    cfg.truncate_every)
                    loss = l1_sequence_loss(preds, targets)
                value = float(loss.data)
                if not math.isfinite(value):
                    if ckpt_path is not None:
                        save_checkpoint(str(ckpt_path) + ".diverged", model)
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} "
                        f"(sample {drawn + 1})")
                tape.backward(loss)
                for name, p in params.items():
                    if p.grad is None:
                        continue
                    if name in acc:
                        acc[name] += p.grad
                    else:
                        acc[name] = p.grad.copy()
                loss_sum += value
                drawn += 1
            for g in acc.values():
                g /= batch
            clip_gradients(acc, cfg.clip_norm)
            opt.step(acc)
        epoch_loss = loss_sum / cfg.samples_per_epoch
        losses.append(epoch_loss)
        if log is not None:
            log(f"epoch {epoch}: loss {epoch_loss:.6f}")
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_epoch = epoch
            if ckpt_path is not None:
                save_checkpoint(ckpt_path, model)
        if cfg.target_ratio is not None \
                and epoch_loss <= cfg.target_ratio * losses[0]:
            break
    return TrainResult(losses, best_epoch, best_loss,
                       None if ckpt_path is None else str(ckpt_path))
