"""Weight-only low-bit quantization with trainable equivalent transformations."""

from .model import ModelConfig, ModelGraph, build_model, find_fusion_sites, forward, fuse_scales
from .quant import QuantSpec, QuantizedTensor, compute_scales, dequantize, fake_quant, quantize
from .tensor import Tensor, finite_diff_check
from .trainer import TrainConfig, init_scales, select_init, train

__all__ = [
    "ModelConfig",
    "ModelGraph",
    "QuantSpec",
    "QuantizedTensor",
    "Tensor",
    "TrainConfig",
    "build_model",
    "compute_scales",
    "dequantize",
    "fake_quant",
    "find_fusion_sites",
    "finite_diff_check",
    "forward",
    "fuse_scales",
    "init_scales",
    "quantize",
    "select_init",
    "train",
]
