"""Generalized few-shot segmentation head with a similarity-transition branch, on synthetic features."""

from .adaptation import AdaptationConfig, AdaptationResult, AdaptationTrace, adapt, run_adaptation
from .errors import (ConfigError, ContractError, DataError, DomainError, GFSSError, IoError,
                     NumericalError, ShapeError)
from .head import ClassPartition, HeadParams, MergeConfig, head_logits, predict
from .metrics import MetricsReport, aggregate, confusion_accumulate, iou_per_class
from .synthgen import TaskSpec, generate_task, train_base_classifier

__version__ = "0.1.0"
