"""How much the heterogeneous convolutions save.

A HetConv filter applies 3x3 kernels to 1/P of its input channels and 1x1
kernels to the rest, so its cost relative to a dense 3x3 layer is
(9/P + 1 - 1/P) / 9.
"""

from dataclasses import replace

from edsc.model import ModelConfig, count_macs, count_params

for p in (1, 2, 4, 8, 16, 32):
    print(f"P={p:2d}  closed form {(9 / p + 1 - 1 / p) / 9:.4f}  "
          f"full-scale params {count_params(ModelConfig.full_scale(hetconv_p=p)) / 1e6:6.2f}M")

cfg = ModelConfig()
dense = replace(cfg, hetconv_p=1)
ratio = count_macs(cfg, 64, 64, "backbone") / count_macs(dense, 64, 64, "backbone")
# the first layer sees only 6 channels, so it cannot be split into exact quarters
print(f"desk-scale backbone MACs, P=4 vs P=1 at 64x64: {ratio:.4f}")
