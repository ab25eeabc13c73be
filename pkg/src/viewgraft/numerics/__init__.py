"""Matrix arithmetic, seeded RNG, Jacobi SVD, reverse-mode tape, SGD."""

from .matrix import Matrix, check_matrix, eye, frobenius, matmul, matrix, ones, rel_frobenius, zeros
from .optim import AdamState, adam_step, sgd_step
from .rng import Rng
from .svd import svd_truncated
from . import tape

__all__ = [
    "AdamState",
    "Matrix",
    "Rng",
    "adam_step",
    "check_matrix",
    "eye",
    "frobenius",
    "matmul",
    "matrix",
    "ones",
    "rel_frobenius",
    "sgd_step",
    "svd_truncated",
    "tape",
    "zeros",
]
