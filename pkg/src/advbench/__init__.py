"""advbench: adversarial robustness evaluation for small convolutional
classifiers, built on an in-package reverse-mode autodiff engine."""

from .autodiff import Tape, Tensor, backward, no_grad
from .attacks import AdversarialBatch, AttackConfig, fgsm, input_gradient, pgd, project_linf
from .data import Dataset, SubsetSpec, batches, load_dataset, subset
from .errors import ConfigError, IntegrityError
from .gradcheck import finite_diff_check
from .nn import ModelConfig, build_model, predict
from .train import TrainConfig, evaluate, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "no_grad",
    "AdversarialBatch",
    "AttackConfig",
    "fgsm",
    "input_gradient",
    "pgd",
    "project_linf",
    "Dataset",
    "SubsetSpec",
    "batches",
    "load_dataset",
    "subset",
    "ConfigError",
    "IntegrityError",
    "finite_diff_check",
    "ModelConfig",
    "build_model",
    "predict",
    "TrainConfig",
    "evaluate",
    "sgd_step",
    "train",
    "__version__",
]
