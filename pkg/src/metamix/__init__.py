"""MetaMix: mixed-precision quantization-aware training on a numpy autodiff engine."""

from .autograd import Tensor, custom_grad, get_dtype, no_grad, precision, set_dtype
from .costmodel import CostTable, RegularizerCfg, bops, count_ops, cost_report, regularizer
from .mixsearch import BitAssignment, BranchSet, finalize, hard_softmax, meta_forward, mix_forward
from .quant import QuantSpec, init_step, quantize, quantize_weights
from .trainer import MetaMixTrainer, PhasePlan, evaluate, load_checkpoint, save_checkpoint
from .zoo import Model, ModelSpec, build_plain_net, build_toy_mobilenet, build_toy_resnet

__version__ = "0.1.0"
