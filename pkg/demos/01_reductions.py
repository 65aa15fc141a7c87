"""Special cases of the deformable separable synthesis.

With zero offsets, unit masks and no residual the synthesis is a local
separable adaptive convolution. With a single tap it becomes flow-based
blending, and warping by a flow is itself a 2x2 convolution whose weights
depend on the fractional part of the flow.
"""

import numpy as np

from edsc.deformable import constant_fields, edsc_forward, flow_mode, sepconv_reference
from edsc.sampling import flow_as_conv, flow_warp
from edsc.tensor import Tensor

rng = np.random.default_rng(0)
B, H, W = 1, 8, 9
I1, I2 = rng.uniform(size=(2, B, 3, H, W))

# local separable convolution
f = constant_fields(B, H, W, 5)
for name in ("k1v", "k1h", "k2v", "k2h"):
    getattr(f, name).data[:] = rng.normal(size=(B, 5, H, W))
out = edsc_forward(Tensor(I1), Tensor(I2), f).data
ref = sepconv_reference(I1, I2, f.k1v, f.k1h, f.k2v, f.k2h)
print("zero offsets vs separable conv:", np.abs(out - ref).max())

# one tap: flow-based blending
flow1, flow2 = rng.normal(0, 2, (2, H, W, 2))
f = constant_fields(B, H, W, 1)
f.k1v.data[:] = 0.5
f.k2v.data[:] = 0.5
f.k1h.data[:] = f.k2h.data[:] = 1.0
# offsets are stored as (dy, dx); flows as (u, v)
f.off1.data[0] = flow1[..., ::-1].transpose(2, 0, 1)
f.off2.data[0] = flow2[..., ::-1].transpose(2, 0, 1)
out = edsc_forward(Tensor(I1), Tensor(I2), f).data[0].transpose(1, 2, 0)
hwc1, hwc2 = I1[0].transpose(1, 2, 0), I2[0].transpose(1, 2, 0)
print("one tap vs flow blending:", np.abs(out - flow_mode(hwc1, hwc2, 0.5, 0.5, flow1, flow2)).max())

# warping as a convolution
print("warp vs stencil:", np.abs(flow_warp(hwc1, flow1) - flow_as_conv(hwc1, flow1)).max())

img = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
flow = np.zeros((2, 2, 2))
flow[0, 0] = (0.5, 0.25)
print("quarter/half pixel sample at (0, 0):", flow_warp(img, flow)[0, 0, 0])
