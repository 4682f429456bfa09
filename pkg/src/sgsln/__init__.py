"""Bitemporal change detection with an exchanging dual encoder-decoder network.

The package is self-contained on top of numpy: a small reverse-mode autodiff
core (:mod:`sgsln.autograd`, :mod:`sgsln.functional`), network blocks and
models, a training engine, synthetic data, metrics and a command line tool.
"""
from .autograd import Tensor, backward, no_grad
from .model import ModelConfig, build_model, count_params, estimate_flops

__all__ = ["Tensor", "backward", "no_grad", "ModelConfig", "build_model", "count_params",
           "estimate_flops"]
__version__ = "0.1.0"
