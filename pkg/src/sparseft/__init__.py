"""Sparse fine-tuning with a stability lens.

Masked SGD over a pretrained numpy MLP, a family of mask-selection
strategies (including second-order SAM scores), stability and
generalization estimators, and a resumable experiment harness.
"""
from .autodiff import Tape, Tensor, apply_primitive, backward, finite_diff_grad
from .errors import SparseFTError
from .models import (Checkpoint, Model, ModelSpec, augment_equivalent, build_model,
                     flatten_params, param_groups, unflatten_params)
from .selection import (SparseMask, StrategyConfig, brute_force_mask, budget, project_l0,
                        sam_scores, surrogate_objective, top_k_select)
from .stats import spearman, welch_ttest
from .tasks import PretrainConfig, TaskSpec, perturbed_datasets, pretrain, synth_task
from .theory import (BoundInputs, expected_regularizer_mc, gen_bound, hessian_diag_fd,
                     lambda_min_fd, phs_bound, phs_estimate, rayleigh_upperbound_check)
from .training import Dataset, RunReport, Splits, TrainConfig, masked_step, train

__version__ = "0.1.0"
