"""Dense tensor engine: tape-based reverse mode, Adam, checkpoints."""

from tokenmoe.diffcore.checkpoint import load_checkpoint, save_checkpoint
from tokenmoe.diffcore.gradcheck import grad_check, grad_check_params
from tokenmoe.diffcore.optim import Adam, adam_step
from tokenmoe.diffcore.params import (
    InitSpec,
    Parameter,
    bias,
    derive_seed,
    init_params,
    make_rng,
    sample_init,
    weight,
)
from tokenmoe.diffcore.tensor import (
    DTYPE,
    Tensor,
    add,
    as_tensor,
    concat,
    conv2d,
    gather_rows,
    identity,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    pad2d,
    relu,
    reshape,
    scatter_rows,
    softmax,
    square,
    sub,
    swap_last,
    take,
    top_k,
    transpose,
    tsum,
)

__all__ = [
    "DTYPE",
    "Adam",
    "InitSpec",
    "Parameter",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "bias",
    "concat",
    "conv2d",
    "derive_seed",
    "gather_rows",
    "grad_check",
    "grad_check_params",
    "identity",
    "init_params",
    "load_checkpoint",
    "log_softmax",
    "make_rng",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "pad2d",
    "relu",
    "reshape",
    "sample_init",
    "save_checkpoint",
    "scatter_rows",
    "softmax",
    "square",
    "sub",
    "swap_last",
    "take",
    "top_k",
    "transpose",
    "tsum",
    "weight",
]
