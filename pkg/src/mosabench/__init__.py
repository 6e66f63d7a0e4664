"""Low-rank motion style adapters for trajectory forecasting, with a
synthetic benchmark world and a numpy reverse-mode autodiff core."""

from .diffcore import Param, Tensor, backward, grad_check, no_grad
from .forecastnet import ForecastModel, ModelConfig, forward, forward_batch, make_batch
from .metrics import EvalReport, ade, evaluate, fde, generalization_error, topk_min
from .mosa import (AdaptMethod, AdaptedModel, AdapterSpec, count_adapter_params, inject, merge,
                   prepare_adaptation, select_trainables, verify_rank)
from .synthworld import (Dataset, SceneGrid, StyleParams, build_scene, generate_dataset, plan_path,
                         sample_trajectory, scenario_preset)
from .trainkit import Adam, TrainConfig, adapt, pretrain, variety_loss

__version__ = "0.1.0"
