"""Early-exit transformer training and inference under simulated pipeline
parallelism, with analytic schedule/memory accounting and oracle-checked
gradients."""

from .autodiff import (
    Tape,
    Tensor,
    backward,
    dot_const,
    finite_difference_check,
    op_forward,
)
from .model import (
    EarlyExitModel,
    ExitSpec,
    ModelConfig,
    StagePartition,
    build_model,
    forward_all_exits,
    partition,
    weighted_loss,
)

__version__ = "0.1.0"
