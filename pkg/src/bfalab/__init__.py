"""Bit-flip attack simulation on int8-quantized MLP and small CNN classifiers."""
__version__ = "0.1.0"

from .attack import AttackConfig, AttackTrace, run_attack  # noqa: E402
from .data import Dataset, load_mnist, synthetic_gaussians  # noqa: E402
from .models import Model, build, load_checkpoint, save_checkpoint  # noqa: E402
from .quant import BitAddress, QuantizedTensor, quantize_layer  # noqa: E402
from .train import TrainingConfig, train  # noqa: E402

__all__ = ["AttackConfig", "AttackTrace", "BitAddress", "Dataset", "Model", "QuantizedTensor", "TrainingConfig",
           "build", "load_checkpoint", "load_mnist", "quantize_layer", "run_attack", "save_checkpoint",
           "synthetic_gaussians", "train"]
