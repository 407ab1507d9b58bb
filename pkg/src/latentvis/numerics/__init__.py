"""Dense linear algebra, seeded randomness and reverse-mode gradients."""

from .autograd import Param, Tensor, no_grad
from .gradcheck import finite_diff_check
from .linalg import (
    layer_norm,
    matmul,
    projection_residual,
    softmax_rows,
    top_right_singular_vectors,
    truncated_svd_project,
)
from .optim import AdamW, global_grad_norm
from .rng import SeededRng

__all__ = [
    "AdamW",
    "Param",
    "SeededRng",
    "Tensor",
    "finite_diff_check",
    "global_grad_norm",
    "layer_norm",
    "matmul",
    "no_grad",
    "projection_residual",
    "softmax_rows",
    "top_right_singular_vectors",
    "truncated_svd_project",
]
