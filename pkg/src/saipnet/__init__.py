"""Desk-scale frequency-aware segmentation network with its own autograd core.

The package is organized bottom-up: `tensor` and `ops` provide reverse-mode
differentiation and spatial primitives, `encoder`/`saff`/`cdc`/`stem` build
the architectural blocks, `network` assembles the model with loss, optimizer
and checkpointing, `datalab` supplies the synthetic corpus and metrics, and
`cli` drives training and evaluation runs.
"""

from .tensor import (
    Module,
    Tensor,
    check_finite,
    finite_diff_grad,
    gradients,
    max_rel_error,
    parameter,
    precision,
)

__version__ = "0.1.0"

__all__ = [
    "Module",
    "Tensor",
    "check_finite",
    "finite_diff_grad",
    "gradients",
    "max_rel_error",
    "parameter",
    "precision",
    "__version__",
]
