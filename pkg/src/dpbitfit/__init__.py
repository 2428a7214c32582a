"""Differentially private bias-term fine-tuning on a small numpy autograd stack."""
from .accountant import calibrate_sigma, epsilon
from .nn import Conv2d, LayerNorm, Linear, Network, build_network, forward
from .privacy import ClippingFn, PrivacySpec, dp_bitfit_step, dp_full_step
from .train import Blobs, DPConfig, TrainConfig, make_task, train

__version__ = "0.1.0"
