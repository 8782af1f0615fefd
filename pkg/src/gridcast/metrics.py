"""Forecast quality metrics for evidential occupancy grids.

Three views of error, from pixel-level to object-level:

* mse: plain mean squared difference over both mass channels.
* image_similarity: symmetrized mean nearest-same-class Manhattan distance
  between two classified grids. Lower is better; 0 means identical label
  maps. Distances come from a multi-source breadth-first flood per class.
* mobbm: per-step ratio of occupied cells inside the ground-truth vehicle
  boxes, prediction versus target. 1 means the objects were fully retained;
  it decays toward 0 as a model lets moving objects vanish.

``evaluate`` runs a model over a batch of episodes with the
N-observed / P-predicted protocol and aggregates per-horizon curves with
standard errors across episodes.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from gridcast.dst import (CLASS_OCCUPIED, EpisodeRecord, box_mask,
                          classify_masses)
from gridcast.tensor import GridcastError, ShapeError

__all__ = [
    "mse", "image_similarity", "mobbm", "evaluate",
    "EvalReport", "PersistenceModel",
]

_CLASSES = (0, 1, 2)


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x))


def mse(pred, target) -> float:
    """Mean squared difference over every cell and channel."""
    pred = _as_array(pred)
    target = _as_array(target)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred.astype(np.float64) - target) ** 2))


def _flood_distances(sources: np.ndarray, cap: float) -> np.ndarray:
    """Taxicab distance to the nearest True cell via multi-source BFS."""
    h, w = sources.shape
    dist = np.full((h, w), cap)
    queue = deque()
    for r, c in zip(*np.nonzero(sources)):
        dist[r, c] = 0.0
        queue.append((r, c))
    while queue:
        r, c = queue.popleft()
        d = dist[r, c] + 1.0
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < h and 0 <= nc < w and d < dist[nr, nc]:
                dist[nr, nc] = d
                queue.append((nr, nc))
    return dist


def _directed_class_distance(a_mask, b_mask, cap: float) -> float:
    """Mean over class cells in a of the distance to the class in b.

    An empty class on the a side contributes nothing; a class present in a
    but absent in b counts the maximum possible distance for every cell.
    """
    if not a_mask.any():
        return 0.0
    if not b_mask.any():
        return cap
    return float(_flood_distances(b_mask, cap)[a_mask].mean())


def image_similarity(m1: np.ndarray, m2: np.ndarray) -> float:
    """Symmetrized picture distance between two label grids."""
    m1 = np.asarray(m1)
    m2 = np.asarray(m2)
    if m1.shape != m2.shape or m1.ndim != 2:
        raise ShapeError(f"label grids must match, {m1.shape} vs {m2.shape}")
    cap = float(m1.shape[0] + m1.shape[1])
    terms = []
    for cls in _CLASSES:
        a = m1 == cls
        b = m2 == cls
        terms.append(_directed_class_distance(a, b, cap))
        terms.append(_directed_class_distance(b, a, cap))
    # fsum keeps the total independent of argument order, so the
    # symmetrized distance is exactly symmetric
    return math.fsum(terms)


def mobbm(pred_labels, target_labels, boxes_per_step,
          resolution: float) -> np.ndarray:
    """Occupied-cell retention inside ground-truth boxes, per step.

    ``boxes_per_step[t]`` iterates ego-frame (cx, cy, ex, ey, heading)
    tuples. Steps whose target has no occupied cell inside any box are
    returned as NaN and flagged with a warning.
    """
    pred_labels = np.asarray(pred_labels)
    target_labels = np.asarray(target_labels)
    if pred_labels.shape != target_labels.shape or pred_labels.ndim != 3:
        raise ShapeError("label sequences must be matching (P, H, W) arrays")
    steps = pred_labels.shape[0]
    if len(boxes_per_step) != steps:
        raise ShapeError("need one box list per step")
    out = np.full(steps, np.nan)
    if not any(len(b) for b in boxes_per_step):
        warnings.warn("mobbm: empty box table, metric undefined")
        return out
    skipped = []
    shape = pred_labels.shape[1:]
    for t in range(steps):
        boxes = list(boxes_per_step[t])
        if not boxes:
            skipped.append(t)
            continue
        inside = box_mask(boxes, shape, resolution)
        n_target = int(np.count_nonzero(
            (target_labels[t] == CLASS_OCCUPIED) & inside))
        if n_target == 0:
            skipped.append(t)
            continue
        n_pred = int(np.count_nonzero(
            (pred_labels[t] == CLASS_OCCUPIED) & inside))
        out[t] = n_pred / n_target
    if skipped:
        warnings.warn(f"mobbm: no target occupancy at steps {skipped}, "
                      "skipped")
    return out


class PersistenceModel:
    """Repeats the last observed frame; the no-dynamics reference."""

    def predict(self, frames, pred_len: int, head_mask=None) -> np.ndarray:
        frames = np.asarray(frames)
        if frames.ndim != 4 or len(frames) < 1:
            raise ShapeError("frames must be a nonempty (N, C, H, W) array")
        return np.repeat(frames[-1:], pred_len, axis=0)


# ---------------------------------------------------------------------------
# Batch evaluation

def _stderr(rows: np.ndarray) -> np.ndarray:
    """Standard error over axis 0, NaN-aware, zero for a single sample."""
    n = np.sum(np.isfinite(rows), axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        std = np.nanstd(rows, axis=0, ddof=1)
    return np.where(n > 1, std / np.sqrt(np.maximum(n, 1)), 0.0)


@dataclass
class EvalReport:
    """Per-horizon metric curves with across-episode spread."""

    model_id: str
    dataset_id: str
    n_context: int
    horizon: int
    n_episodes: int
    mse_steps: np.ndarray
    mse_err: np.ndarray
    is_steps: np.ndarray
    is_err: np.ndarray
    mobbm_steps: np.ndarray
    mobbm_err: np.ndarray

    def validate(self) -> None:
        for name in ("mse_steps", "mse_err", "is_steps", "is_err",
                     "mobbm_steps", "mobbm_err"):
            if getattr(self, name).shape != (self.horizon,):
                raise ShapeError(f"{name} must have length {self.horizon}")

    def summary(self) -> dict[str, float]:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return {"mse": float(np.nanmean(self.mse_steps)),
                    "is": float(np.nanmean(self.is_steps)),
                    "mobbm": float(np.nanmean(self.mobbm_steps))}

    def to_text(self) -> str:
        lines = ["# gridcast-eval v1",
                 f"# model={self.model_id} dataset={self.dataset_id} "
                 f"context={self.n_context} horizon={self.horizon} "
                 f"episodes={self.n_episodes}",
                 "# columns: step mse mse_err is is_err mobbm mobbm_err"]
        for t in range(self.horizon):
            lines.append(
                f"{t + 1} {self.mse_steps[t]:.8g} {self.mse_err[t]:.8g} "
                f"{self.is_steps[t]:.8g} {self.is_err[t]:.8g} "
                f"{self.mobbm_steps[t]:.8g} {self.mobbm_err[t]:.8g}")
        s = self.summary()
        lines.append(f"# summary: mse={s['mse']:.8g} is={s['is']:.8g} "
                     f"mobbm={s['mobbm']:.8g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        meta: dict[str, str] = {}
        rows = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("# ")
                if body.startswith("model="):
                    for part in body.split():
                        key, _, value = part.partition("=")
                        meta[key] = value
                continue
            try:
                rows.append([float(tok) for tok in line.split()])
            except ValueError as exc:
                raise GridcastError(f"bad eval report line: {line!r}") from exc
        if not meta or not rows:
            raise GridcastError("not an eval report")
        arr = np.array(rows)
        return cls(model_id=meta["model"], dataset_id=meta["dataset"],
                   n_context=int(meta["context"]),
                   horizon=int(meta["horizon"]),
                   n_episodes=int(meta["episodes"]),
                   mse_steps=arr[:, 1], mse_err=arr[:, 2],
                   is_steps=arr[:, 3], is_err=arr[:, 4],
                   mobbm_steps=arr[:, 5], mobbm_err=arr[:, 6])


def evaluate(model, episodes, n_context: int, horizon: int,
             model_id: str = "model", dataset_id: str = "episodes",
             head_mask=None) -> EvalReport:
    """Roll the model over each episode and average per-horizon metrics.

    Feeds ``n_context`` frames, predicts ``horizon`` frames closed-loop and
    scores them against the recorded continuation.
    """
    episodes = list(episodes)
    if not episodes:
        raise GridcastError("no episodes to evaluate")
    per_mse, per_is, per_mobbm = [], [], []
    for ep in episodes:
        if ep.length < n_context + horizon:
            raise GridcastError(
                f"episode length {ep.length} < context {n_context} + "
                f"horizon {horizon}")
        frames = ep.masses[:n_context].astype(np.float64)
        preds = model.predict(frames, horizon, head_mask)
        targets = ep.masses[n_context:n_context + horizon].astype(np.float64)
        mse_row = np.array([mse(preds[t], targets[t])
                            for t in range(horizon)])
        pred_labels = np.stack([classify_masses(preds[t, 0], preds[t, 1])
                                for t in range(horizon)])
        target_labels = np.stack(
            [classify_masses(targets[t, 0], targets[t, 1])
             for t in range(horizon)])
        is_row = np.array([image_similarity(pred_labels[t], target_labels[t])
                           for t in range(horizon)])
        boxes = [[tuple(rec)[2:] for rec in ep.boxes_at(n_context + t)]
                 for t in range(horizon)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mobbm_row = mobbm(pred_labels, target_labels, boxes,
                              ep.resolution)
        per_mse.append(mse_row)
        per_is.append(is_row)
        per_mobbm.append(mobbm_row)
    mse_rows = np.stack(per_mse)
    is_rows = np.stack(per_is)
    mobbm_rows = np.stack(per_mobbm)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mobbm_mean = np.nanmean(mobbm_rows, axis=0)
    report = EvalReport(
        model_id=model_id, dataset_id=dataset_id, n_context=n_context,
        horizon=horizon, n_episodes=len(episodes),
        mse_steps=mse_rows.mean(axis=0), mse_err=_stderr(mse_rows),
        is_steps=is_rows.mean(axis=0), is_err=_stderr(is_rows),
        mobbm_steps=mobbm_mean, mobbm_err=_stderr(mobbm_rows))
    report.validate()
    return report
