"""Video frame interpolation with deformable separable convolution, in numpy."""

from .data import MotionSpec, gen_sequence, make_dataset
from .deformable import Fields, edsc_forward, flow_mode, naive_time_rescale, sepconv_reference
from .model import ModelConfig, ModelParams, build_model, count_macs, count_params, forward, interpolate
from .metrics import evaluate, psnr, ssim
from .sampling import bilinear_sample, flow_as_conv, flow_warp, read_flo, write_flo
from .tensor import NonFiniteError, ShapeError, Tensor
from .training import LossConfig, TrainConfig, dni_interpolate, train

__version__ = "0.1.0"
