"""Post-training quantization toolkit for small residual CNNs."""

from .calibration import ScaleMethod, Method, CalibrationStats, compute_quant_params
from .graph import ModelGraph, QuantPlan, load_model, save_model, fold_batchnorm, insert_quant_nodes
from .quant import IntRange, QuantParams, fake_quantize_tensor, quant_mse
from .tensor import AxisGroup

__version__ = "0.1.0"
