"""Rotation-aware post-training quantization for toy pre-norm transformers.

The package rotates the residual stream (R1), each attention head's
value/output pair (R2) and, online, the query/key (R3) and down-projection
input (R4) with orthogonal or Hadamard matrices, learns R1/R2 with Cayley SGD
against the quantized loss, and measures what the rotations do to outliers
and quantization error.
"""

from .linalg import fwht, random_hadamard, random_orthogonal, sylvester_hadamard
from .model import ModelConfig, QuantSites, ToyTransformer, fold_rmsnorm, forward, init_model
from .quant import GptqConfig, QuantSpec, gptq_quantize, quant_dequant, quantize
from .rotate import RotationSet, make_rotation_set, merge_rotations
from .cayley import CayleyConfig, cayley_step, optimize_rotations

__version__ = "0.1.0"

__all__ = [
    "CayleyConfig", "GptqConfig", "ModelConfig", "QuantSites", "QuantSpec", "RotationSet", "ToyTransformer",
    "cayley_step", "fold_rmsnorm", "forward", "fwht", "gptq_quantize", "init_model", "make_rotation_set",
    "merge_rotations", "optimize_rotations", "quant_dequant", "quantize", "random_hadamard", "random_orthogonal",
    "sylvester_hadamard",
]
