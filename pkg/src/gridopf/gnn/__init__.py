"""Graph neural network OPF surrogate and its trainer."""
from .model import (Batch, ModelConfig, Prepared, evaluate_loss, expected_param_count, forward,
                    gradient, init_params, loss, make_batch, param_count, predict_batch, prepare)
from .train import TrainConfig, TrainingError, TrainResult, batch_positions, lr_at, train, validate

__all__ = [
    "Batch", "ModelConfig", "Prepared", "TrainConfig", "TrainResult", "TrainingError",
    "batch_positions", "evaluate_loss", "expected_param_count", "forward", "gradient",
    "init_params", "loss", "lr_at", "make_batch", "param_count", "predict_batch", "prepare",
    "train", "validate",
]
