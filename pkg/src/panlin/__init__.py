"""Linear group-attention, semantic-branch cost modeling, and panoptic metrics.

The compute core lives in the submodules; `panlin.service.create_app` wraps
it in a FastAPI service and `panlin.cli` is a thin command-line client.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    DimensionError,
    NumericError,
    PanlinError,
    UsageError,
)
from .tensor import ConvKernel, EinsumSpec, Tensor, tensor  # noqa: F401
