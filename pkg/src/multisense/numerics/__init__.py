from .tensor import (  # noqa: F401
    DEFAULT_DTYPE,
    GraphError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    is_grad_enabled,
    no_grad,
    parameter,
)
from . import ops  # noqa: F401
from .optim import Adam, LrSchedule, schedule_lr  # noqa: F401
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint  # noqa: F401
