"""Train a small model on synthetic triplets and compare it to the two
trivial baselines (average of the inputs, copy of the first frame).

Takes a few minutes on one core.
"""

import numpy as np

from edsc.data import make_dataset
from edsc.metrics import psnr
from edsc.model import ModelConfig, build_model, interpolate
from edsc.training import TrainConfig, train

kw = dict(size=32, max_speed=4.0, max_bg_speed=2.0, object_size=(8, 12))
data = make_dataset(48, seed=1, **kw)
val = make_dataset(16, seed=99, **kw)

params = build_model(ModelConfig(widths=(8, 16, 32), estimator_widths=(8, 8, 8)))
params, log = train(params, data, TrainConfig(epochs=40, lr=2e-3, halve_every=20, batch=4, crop=None), val=val,
                    on_epoch=lambda r: print(r.line()))

overlay = np.mean([psnr(0.5 * (v.frame1 + v.frame2), v.targets[0.5]) for v in val])
copy = np.mean([psnr(v.frame1, v.targets[0.5]) for v in val])
model = np.mean([psnr(np.clip(interpolate(params, v.frame1, v.frame2), 0, 1), v.targets[0.5]) for v in val])
print(f"held-out PSNR: model {model:.2f}  overlay {overlay:.2f}  copy {copy:.2f}")
