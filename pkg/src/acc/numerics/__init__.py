"""Dense tensors, reverse-mode autodiff, seeded RNG streams, optimizer,
and the shared checkpoint container."""

from .checkpoint import read_checkpoint, write_checkpoint
from .optim import Adam
from .rng import ALGORITHM, SeedStreams
from .tensor import (Tensor, add, add_bias, bce_with_logits, concat_cols,
                     concat_rows, cross_entropy, embedding, gelu,
                     kl_divergence, logsigmoid, matmul, mean_all, mean_rows,
                     mul, neg, rmsnorm, scale, sigmoid, slice_cols,
                     slice_rows, softmax, sub, sum_all, tensor, transpose)

__all__ = [
    "Tensor", "tensor", "add", "add_bias", "neg", "sub", "mul", "scale",
    "matmul", "transpose", "embedding", "concat_rows", "concat_cols",
    "slice_rows", "slice_cols", "sum_all", "mean_all", "mean_rows",
    "softmax", "cross_entropy", "kl_divergence", "gelu", "rmsnorm",
    "sigmoid", "logsigmoid", "bce_with_logits",
    "Adam", "SeedStreams", "ALGORITHM",
    "read_checkpoint", "write_checkpoint",
]
