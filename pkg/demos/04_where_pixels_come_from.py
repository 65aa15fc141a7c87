"""Effective sampling locations of one output pixel.

Each tap deposits its absolute weight at the position it samples, so the
maps show where the colour of that pixel is drawn from in each input frame.
Writes two weight maps and the synthesized frame to ./viz_demo.
"""

from pathlib import Path

import numpy as np

from edsc.cli import _green
from edsc.data import MotionSpec, gen_sequence
from edsc.deformable import effective_sampling_map
from edsc.fileio import write_image
from edsc.model import ModelConfig, build_model, forward, frames_to_tensor, tensor_to_frames
from edsc.training import TrainConfig, train
from edsc.data import make_dataset

kw = dict(size=32, max_speed=4.0, object_size=(8, 12))
params = build_model(ModelConfig(widths=(8, 16, 32), estimator_widths=(8, 8, 8)))
params, _ = train(params, make_dataset(32, seed=1, **kw), TrainConfig(epochs=20, lr=2e-3, halve_every=10, crop=None))

seq = gen_sequence(MotionSpec(size=(32, 32), velocity=(4.0, 0.0), object_size=(10, 10), start=(11.0, 11.0)), seed=3)
I1, I2 = frames_to_tensor(seq.frames[0]), frames_to_tensor(seq.frames[-1])
out, fields = forward(params, I1, I2)
pixel = (16, 16)
w1, w2 = effective_sampling_map(fields, pixel)
print("weight mass per frame:", w1.sum(), w2.sum())

out_dir = Path("viz_demo")
out_dir.mkdir(exist_ok=True)
write_image(out_dir / "weights_frame1.ppm", _green(w1))
write_image(out_dir / "weights_frame2.ppm", _green(w2))
write_image(out_dir / "synthesized.ppm", np.clip(tensor_to_frames(out)[0], 0, 1))
