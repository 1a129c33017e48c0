"""Hybrid optical neural network toolkit: NTK estimation, NTK distillation, fabrication compensation."""

from .errors import (ConfigError, DataFormatError, NumericalError, OnnkitError, ShapeError, SpecError,
                     StageOrderError)
from .net import LayerSpec, Network, NetworkSpec, build_network, forward, loss_and_grad, per_sample_jacobian

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataFormatError", "NumericalError", "OnnkitError", "ShapeError", "SpecError",
           "StageOrderError", "LayerSpec", "Network", "NetworkSpec", "build_network", "forward", "loss_and_grad",
           "per_sample_jacobian"]
