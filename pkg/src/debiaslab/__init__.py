"""Two-pass adversarial debiasing with ablation-guided partial fine-tuning."""

from .autodiff import OptimizerState, Tensor, backward, forward_op, grad_check, sgd_step
from .model import DualHeadModel, FilterMask, LayerSpec, apply_filter_mask, build_model, forward_dual, set_trainable
from .training import TrainConfig, train_baseline, train_debias, two_step_update

__version__ = "0.1.0"
