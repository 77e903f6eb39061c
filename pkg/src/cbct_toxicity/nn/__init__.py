from cbct_toxicity.nn.tensor import (  # noqa: F401
    ShapeError,
    Tensor,
    as_tensor,
    concatenate,
    is_grad_enabled,
    no_grad,
    stack,
)
from cbct_toxicity.nn.layers import (  # noqa: F401
    BatchNorm,
    Conv3d,
    Dropout,
    LeakyReLU,
    Linear,
    Module,
    Parameter,
    ReLU,
    Sequential,
)
