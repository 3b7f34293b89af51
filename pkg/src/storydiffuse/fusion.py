"""Denoiser input layout and textual-guidance masking.

A fused sequence for N panels of L tokens has N*L + 2N positions::

    [ noisy text (panel 0 .. N-1, L each) | visual slots F_v (N) | text slots F_t (N) ]

Segment ids are 0 / 1 / 2 for the three blocks.  Masked text guidance means
the text slots are zero vectors and excluded from attention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import Rng, Tensor, concat
from .nncore.tensor import ShapeError, as_tensor

SEG_TEXT, SEG_VISUAL, SEG_GUIDE = 0, 1, 2


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 0.3
    p_unguide: float = 0.5

    def __post_init__(self):
        if self.w < 0:
            raise ValueError(f"guidance strength w must be >= 0, got {self.w}")
        if not 0.0 <= self.p_unguide <= 1.0:
            raise ValueError(f"p_unguide must be in [0, 1], got {self.p_unguide}")


@dataclass
class FusedSequence:
    embeddings: Tensor  # (B, P, d)
    segment_ids: np.ndarray  # (P,)
    panel_ids: np.ndarray  # (P,)
    position_ids: np.ndarray  # (P,) in-panel token index; L for feature slots
    attention_mask: np.ndarray  # (B, P) True = attendable
    text_guidance_masked: np.ndarray  # (B,) bool
    n_panels: int
    max_len: int

    @property
    def n_text(self) -> int:
        return self.n_panels * self.max_len


def layout(n_panels: int, max_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    N, L = n_panels, max_len
    seg = np.concatenate([np.full(N * L, SEG_TEXT), np.full(N, SEG_VISUAL), np.full(N, SEG_GUIDE)])
    panel = np.concatenate([np.repeat(np.arange(N), L), np.arange(N), np.arange(N)])
    pos = np.concatenate([np.tile(np.arange(L), N), np.full(2 * N, L)])
    return seg.astype(np.int64), panel.astype(np.int64), pos.astype(np.int64)


def fuse(x_t, F_v, F_t, mask_text, token_mask=None) -> FusedSequence:
    """Concatenate noisy text, visual history and (maybe masked) text guidance.

    Shapes: x_t (B, N, L, d) or (N, L, d); F_v and F_t (B, N, d) or (N, d).
    ``mask_text`` is a bool or a (B,) array.  ``token_mask`` (B, N, L) marks
    real (non-padded) text positions; omitted means every position is real.
    """
    x_t, F_v, F_t = as_tensor(x_t), as_tensor(F_v), as_tensor(F_t)
    if x_t.ndim == 3:
        x_t, F_v, F_t = x_t.reshape(1, *x_t.shape), F_v.reshape(1, *F_v.shape), F_t.reshape(1, *F_t.shape)
        if token_mask is not None:
            token_mask = np.asarray(token_mask)[None]
    B, N, L, d = x_t.shape
    if F_v.shape != (B, N, d) or F_t.shape != (B, N, d):
        raise ShapeError(
            f"fuse: inconsistent panels: x_t {x_t.shape}, F_v {F_v.shape}, F_t {F_t.shape}"
        )
    masked = np.broadcast_to(np.asarray(mask_text, dtype=bool), (B,)).copy()
    keep = (~masked).astype(x_t.dtype)[:, None, None]
    guide = F_t * keep if masked.any() else F_t
    emb = concat([x_t.reshape(B, N * L, d), F_v, guide], axis=1)

    if token_mask is None:
        tmask = np.ones((B, N * L), dtype=bool)
    else:
        tmask = np.asarray(token_mask, dtype=bool).reshape(B, N * L)
    attn = np.concatenate([tmask, np.ones((B, N), dtype=bool), np.repeat(~masked[:, None], N, axis=1)], axis=1)
    seg, panel, pos = layout(N, L)
    return FusedSequence(emb, seg, panel, pos, attn, masked, N, L)


def unfuse(fused: FusedSequence) -> Tensor:
    """Segment-0 block reshaped to (B, N, L, d)."""
    B, _, d = fused.embeddings.shape
    return fused.embeddings[:, : fused.n_text].reshape(B, fused.n_panels, fused.max_len, d)


def draw_unguide_mask(p_unguide: float, rng: Rng, n: int = 1) -> np.ndarray:
    """One Bernoulli(p_unguide) flag per story sample."""
    if not 0.0 <= p_unguide <= 1.0:
        raise ValueError(f"p_unguide must be in [0, 1], got {p_unguide}")
    if p_unguide == 0.0:
        return np.zeros(n, dtype=bool)
    if p_unguide == 1.0:
        return np.ones(n, dtype=bool)
    return rng.bernoulli(p_unguide, size=n)


def cfg_combine(est_cond, est_uncond, w: float):
    """(1 + w) * cond - w * uncond, evaluated as cond + w * (cond - uncond).

    The rearranged form returns ``est_cond`` bit-for-bit when w == 0 or when
    both estimates are equal.
    """
    a = est_cond.data if isinstance(est_cond, Tensor) else np.asarray(est_cond)
    b = est_uncond.data if isinstance(est_uncond, Tensor) else np.asarray(est_uncond)
    if a.shape != b.shape:
        raise ShapeError(f"cfg_combine: shapes {a.shape} and {b.shape} differ")
    if w == 0:
        return a.copy()
    return a + w * (a - b)
