"""Multimodal sequence fusion: TEMMA and self-attention Bi-GRU with late
Bi-LSTM fusion, on a small numpy autodiff core."""

from .metrics import MetricReport, auc, ccc, combined_stress, pearson
from .models import SaGruConfig, StressModel, Temma, TemmaConfig, load_checkpoint, predict, save_checkpoint
from .tensor import Rng, Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"
