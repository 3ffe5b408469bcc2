"""Numerical engine: kernels, autodiff, parameters, datasets and training."""
from .autodiff import eval_operator, forward, backward
from .data import Dataset, DatasetPair, synthetic
from .params import ParamStore
from .train import TrainConfig, accuracy, eval_model, finetune, grad, train_model

__all__ = [
    "eval_operator", "forward", "backward", "Dataset", "DatasetPair", "synthetic", "ParamStore",
    "TrainConfig", "accuracy", "eval_model", "finetune", "grad", "train_model",
]
