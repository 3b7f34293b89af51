"""Minimal differentiable numeric core."""
from .tensor import (
    Tensor,
    ShapeError,
    add,
    concat,
    cross_entropy,
    default_dtype,
    embedding,
    gelu,
    get_default_dtype,
    l1_loss,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    no_grad,
    set_default_dtype,
    softmax,
    sub,
    tabs,
)
from .layers import (
    ConfigError,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    SelfAttention,
    TransformerBlock,
    attention_bias,
    multi_head_self_attention,
    sinusoidal_embedding,
)
from .optim import AdamW, NumericError, cosine_annealing_lr
from .rng import Rng
from .checkpoint import CheckpointError, load_checkpoint, load_meta, save_checkpoint
