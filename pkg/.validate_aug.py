"""Quick check: does coherent pair augmentation unblock learning?

Trains 2000 iterations with the fixed sampler, then compares against
the cached run's 2000-iteration checkpoint on held-out data.
"""
import time

import numpy as np

from ecc.eccw import load_weights
from ecc.kernels import warmup
from ecc.metrics import evaluate
from ecc.model import EccNet
from ecc.synthdata import load_dataset
from ecc.training import TrainConfig, train

warmup()
train_sets = load_dataset(".cache/data/train")
heldout = load_dataset(".cache/data/heldout")

cfg = TrainConfig(iterations=2000, batch_size=16, seed=0, checkpoint_every=0)
model = EccNet(seed=0)
t0 = time.time()


def report(r):
    print(f"iter {r.iteration:5d} corr {r.correction:.5f} "
          f"recon {r.reconstruction:.5f} elapsed {time.time() - t0:6.0f}s",
          flush=True)


train(model, train_sets, cfg, on_report=report)

old = EccNet(seed=0)
old.load_weights(load_weights(".cache/run/ckpt_002000.eccw"))

for name, m in (("coherent-aug @2k", model), ("old independent-aug @2k", old)):
    rep = evaluate(m, heldout, max_pairs=150, seed=0)
    print(f"{name}: rel err mean {rep.relative_error:.4f} "
          f"median {rep.relative_error_median:.4f} "
          f"mean|flow| {rep.mean_abs_flow_px:.3f} px "
          f"pearson h {rep.pearson_h:.3f} v {rep.pearson_v:.3f}", flush=True)
