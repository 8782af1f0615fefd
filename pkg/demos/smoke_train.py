"""Overfit a small stack on a handful of episodes, then inspect the fit.

Takes a couple of minutes on a laptop core. Writes the loss curve and a
side-by-side of predicted vs observed pignistic frames.
"""
import os
import time

import numpy as np

from gridcast.dst import generate_episode, pignistic
from gridcast.metrics import mse
from gridcast.plots import svg_line_chart, write_pgm
from gridcast.prednet import build_variant, save_checkpoint
from gridcast.training import TrainConfig, train

OUT = os.path.join(os.path.dirname(__file__), "out", "smoke_train")
os.makedirs(OUT, exist_ok=True)

N_CONTEXT, PRED_LEN = 5, 10
rng = np.random.default_rng(7)
episodes = [generate_episode("passing", N_CONTEXT + PRED_LEN, rng)
            for _ in range(4)]

model = build_variant("taa", "desk", seed=0)
cfg = TrainConfig(n_context=N_CONTEXT, pred_len=PRED_LEN, epochs=12,
                  samples_per_epoch=4, batch_size=1, lr=1e-2, seed=0)
print(f"training a temporal-attention stack on {len(episodes)} episodes "
      f"({cfg.epochs} epochs x {cfg.samples_per_epoch} samples)...")
t0 = time.time()
result = train(model, episodes, cfg, log=print)
print(f"done in {time.time() - t0:.0f}s; best epoch {result.best_epoch} "
      f"at loss {result.best_loss:.4f}")

save_checkpoint(os.path.join(OUT, "model.ckpt"), model)

xs = np.arange(1, len(result.losses) + 1, dtype=float)
svg = svg_line_chart({"train L1": (xs, np.array(result.losses))},
                     title="smoke training", x_label="epoch",
                     y_label="L1 loss")
with open(os.path.join(OUT, "loss_curve.svg"), "w") as fh:
    fh.write(svg)

# one-step forecasts vs just repeating the last observed frame
m_err, p_err = [], []
for ep in episodes:
    ctx = ep.masses[:N_CONTEXT].astype(np.float64)
    target = ep.masses[N_CONTEXT].astype(np.float64)
    m_err.append(mse(model.predict(ctx, 1)[0], target))
    p_err.append(mse(ctx[-1], target))
print(f"t+1 MSE: model {np.mean(m_err):.5f} vs persistence "
      f"{np.mean(p_err):.5f}")

ep = episodes[0]
preds = model.predict(ep.masses[:N_CONTEXT].astype(np.float64), PRED_LEN)
for k in (0, 4, 9):
    pred_p = np.clip(preds[k][0] + 0.5 * (1 - preds[k][0] - preds[k][1]),
                     0.0, 1.0)
    true_p = pignistic(ep.frame(N_CONTEXT + k))
    write_pgm(os.path.join(OUT, f"pred_{k:02d}.pgm"),
              (pred_p * 255).astype(np.uint8))
    write_pgm(os.path.join(OUT, f"true_{k:02d}.pgm"),
              (true_p * 255).astype(np.uint8))
print(f"wrote curve, checkpoint and frames to {OUT}")
