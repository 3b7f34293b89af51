"""Parameters, modules and the standard layers built on the tape."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as tt
from .tensor import Tensor, ShapeError


class ConfigError(ValueError):
    pass


class Parameter(Tensor):
    """A named leaf tensor owned by a module.  Frozen parameters never train."""

    __slots__ = ("frozen", "name")

    def __init__(self, data, frozen: bool = False, name: str = ""):
        super().__init__(data, requires_grad=not frozen)
        self.frozen = frozen
        self.name = name

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    @property
    def tensor(self) -> Tensor:
        return self


class Module:
    """Tiny module tree: attributes that are Parameters or Modules are discovered by name."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def num_parameters(self, trainable_only: bool = False) -> int:
        ps = self.trainable_parameters() if trainable_only else self.parameters()
        return int(sum(p.data.size for p in ps))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def name_parameters(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _init_normal(rng, shape, std) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True, std: float | None = None):
        std = (1.0 / np.sqrt(d_in)) if std is None else std
        self.weight = Parameter(_init_normal(rng, (d_in, d_out), std))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear: input {x.shape} vs weight {self.weight.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return tt.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng, std: float = 0.02):
        self.weight = Parameter(_init_normal(rng, (n, d), std))

    def forward(self, ids) -> Tensor:
        return tt.embedding(self.weight, ids)


NEG_INF = -1e9


def attention_bias(key_mask=None, causal_len: int | None = None, dtype=np.float64) -> np.ndarray | None:
    """Additive attention bias.

    ``key_mask`` has shape (..., seq) with True at attendable positions; the
    result broadcasts against scores of shape (..., heads, seq, seq).
    """
    bias = None
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        bias = np.where(km, 0.0, NEG_INF).astype(dtype)[..., None, None, :]
    if causal_len is not None:
        c = np.triu(np.full((causal_len, causal_len), NEG_INF, dtype=dtype), k=1)
        bias = c if bias is None else bias + c
    return bias


def multi_head_self_attention(x: Tensor, wq, wk, wv, wo, heads: int, bias=None) -> Tensor:
    """Scaled dot-product self-attention over x of shape (..., seq, dim).

    ``wq``..``wo`` are :class:`Linear` modules; ``bias`` is an additive
    score mask from :func:`attention_bias`.
    """
    *lead, seq, dim = x.shape
    if dim % heads:
        raise ConfigError(f"attention: dim {dim} not divisible by heads {heads}")
    hd = dim // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(*lead, seq, heads, hd).swapaxes(-2, -3)

    q, k, v = split(wq(x)), split(wk(x)), split(wv(x))
    scores = (q @ k.swapaxes(-1, -2)) * float(1.0 / np.sqrt(hd))
    if bias is not None:
        scores = scores + bias
    att = tt.softmax(scores, axis=-1)
    ctx = (att @ v).swapaxes(-2, -3).reshape(*lead, seq, dim)
    return wo(ctx)


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng):
        if dim % heads:
            raise ConfigError(f"attention: dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def forward(self, x: Tensor, bias=None) -> Tensor:
        return multi_head_self_attention(x, self.q, self.k, self.v, self.o, self.heads, bias)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(tt.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm encoder block: x + attn(ln(x)); x + ffn(ln(x))."""

    def __init__(self, dim: int, heads: int, ff_mult: int, rng):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim, rng)

    def forward(self, x: Tensor, bias=None) -> Tensor:
        x = x + self.attn(self.ln1(x), bias)
        return x + self.ff(self.ln2(x))


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Standard transformer sinusoid of integer timesteps ``t`` -> (..., dim)."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t[..., None] * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb
