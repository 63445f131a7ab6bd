"""hybridbert: a hybrid attention/pooling transformer encoder, from scratch.

The package is a small numpy-backed library: an autograd tensor core, the
two token mixers (multi-head self-attention with an optional DropMask
variant, and a global-aggregation + local-max-pooling network), a masked
language modeling + sentence structure objective pre-training pipeline,
and a benchmark harness for the linear-vs-quadratic scaling contrast.
"""

from .tensor import (
    Tape,
    Tensor,
    backward,
    embedding,
    gelu,
    layer_norm,
    log_softmax_lastdim,
    masked_fill,
    matmul,
    max_pool1d,
    neg_inf,
    softmax_lastdim,
    zero_grads,
)
from .gradcheck import grad_check

__version__ = "0.1.0"
