"""Frozen pseudo-backbone features and trainable story-domain adapters.

The backbone stands in for a pretrained vision-language encoder: a fixed,
seed-derived random projection for scene attributes and a fixed word table
mean-pooled for captions.  Nothing in the backbone ever receives gradients.
"""
from __future__ import annotations

import numpy as np

from .dataset import PAD_ID, BOS_ID
from .nncore import Module, Parameter, Rng, Tensor
from .nncore.tensor import ShapeError


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n > 0, x / np.where(n > 0, n, 1.0), 0.0)


class Backbone:
    def __init__(self, attr_dim: int, vocab_size: int, d_feat: int = 64, seed: int = 1234):
        self.attr_dim = attr_dim
        self.vocab_size = vocab_size
        self.d_feat = d_feat
        self.seed = seed
        rng = Rng(seed).child("backbone")
        self.image_proj = rng.child("image").normal(size=(attr_dim, d_feat)) / np.sqrt(attr_dim)
        self.text_table = rng.child("text").normal(size=(vocab_size, d_feat)) / np.sqrt(d_feat)
        self.image_proj.setflags(write=False)
        self.text_table.setflags(write=False)

    def encode_image(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape[-1] != self.attr_dim:
            raise ShapeError(f"encode_image: observation width {obs.shape[-1]} != {self.attr_dim}")
        return _unit(obs @ self.image_proj)

    def encode_text(self, token_ids) -> np.ndarray:
        """Mean-pooled frozen embeddings of the non-padding tokens, unit norm.

        Accepts a single sequence or an array (..., L) of padded sequences.
        """
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise KeyError(f"encode_text: token id outside vocabulary of {self.vocab_size}")
        if ids.ndim == 0:
            ids = ids[None]
        keep = (ids != PAD_ID) & (ids != BOS_ID)
        rows = self.text_table[ids] * keep[..., None]
        count = keep.sum(axis=-1, keepdims=True)
        pooled = rows.sum(axis=-2) / np.maximum(count, 1)
        return _unit(pooled)

    def manifest(self) -> dict:
        return {"attr_dim": self.attr_dim, "vocab_size": self.vocab_size, "d_feat": self.d_feat, "seed": self.seed}


class Adapter(Module):
    """out = g * head(f) + (1 - g) * (f @ W + b), with head(f) the first
    d_model coordinates of f and the gate g kept in [0, 1]."""

    def __init__(self, d_feat: int, d_model: int):
        if d_model > d_feat:
            raise ValueError("adapter expects d_model <= d_feat")
        self.d_model = d_model
        self.weight = Parameter(np.eye(d_feat, d_model))
        self.bias = Parameter(np.zeros(d_model))
        self.gate = Parameter(np.zeros(()))

    def forward(self, feature) -> Tensor:
        f = feature if isinstance(feature, Tensor) else Tensor(feature)
        head = f[..., : self.d_model]
        lin = f @ self.weight + self.bias
        return lin + (head - lin) * self.gate

    def clamp_gate(self) -> None:
        np.clip(self.gate.data, 0.0, 1.0, out=self.gate.data)


def adapt(feature, adapter: Adapter) -> Tensor:
    return adapter(feature)


class FixedHead(Module):
    """Adapter-free path: keep the first d_model backbone coordinates."""

    def __init__(self, d_model: int):
        self.d_model = d_model

    def forward(self, feature) -> Tensor:
        f = feature if isinstance(feature, Tensor) else Tensor(feature)
        return f[..., : self.d_model]


class MultimodalEncoder(Module):
    """Backbone + per-modality adapters producing F_v and F_t of width d_model."""

    def __init__(self, backbone: Backbone, d_model: int, use_adapters: bool = True):
        self.backbone = backbone
        self.use_adapters = use_adapters
        if use_adapters:
            self.image_adapter = Adapter(backbone.d_feat, d_model)
            self.text_adapter = Adapter(backbone.d_feat, d_model)
        else:
            self.image_adapter = FixedHead(d_model)
            self.text_adapter = FixedHead(d_model)

    def image_features(self, attrs=None, backbone_feat=None) -> Tensor:
        f = self.backbone.encode_image(attrs) if backbone_feat is None else backbone_feat
        return self.image_adapter(Tensor(f))

    def text_features(self, tokens=None, backbone_feat=None) -> Tensor:
        f = self.backbone.encode_text(tokens) if backbone_feat is None else backbone_feat
        return self.text_adapter(Tensor(f))

    def clamp(self) -> None:
        if self.use_adapters:
            self.image_adapter.clamp_gate()
            self.text_adapter.clamp_gate()
