"""Supervised stage-1 training of the XT model on the toy corpus.

Prints held-out SI-SNR improvement before/after, next to the ideal-mask
ceiling, and saves the model to stage1.ckpt. About half a minute on one core.

Run: python3 demos/02_train_stage1.py [steps]
"""
import sys
import time

from csskit import recipes
from csskit.config import parse_config
from csskit.io import save_checkpoint
from csskit.train import ema

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
cfg = parse_config({})

t0 = time.time()
model, rep = recipes.stage1_experiment(cfg, steps=steps)
print(f"trained {steps} steps in {time.time() - t0:.0f} s")

smooth = ema([c[2] for c in rep["curve"]])
print("loss (ema):", " ".join(f"{v:.0f}" for v in smooth[:: max(1, steps // 10)]))
for name in ("init", "trained", "oracle"):
    r = rep[name]
    print(f"{name:8s} gain {r['si_snr_improvement']:6.2f} dB  (overlap {r['si_snr_improvement_ovlp']:6.2f})")

save_checkpoint("stage1.ckpt", model)
print("saved stage1.ckpt")
