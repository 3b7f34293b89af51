"""Bidirectional transformer that predicts clean word embeddings x0."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .fusion import SEG_GUIDE, SEG_TEXT, SEG_VISUAL, FusedSequence
from .schedule import make_schedule
from .nncore import (
    Embedding,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Rng,
    Tensor,
    TransformerBlock,
    attention_bias,
    sinusoidal_embedding,
)
from .nncore import tensor as tt


@dataclass
class DenoiserConfig:
    vocab_size: int
    n_panels: int
    max_len: int
    T: int = 1000
    d_model: int = 32
    n_blocks: int = 4
    heads: int = 4
    ff_mult: int = 4
    embed_seed: int = 7
    # precondition inputs to unit per-coordinate scale: feature slots by
    # sqrt(d), noisy text by 1/sqrt(ab/d + 1 - ab); outputs by 1/sqrt(d)
    io_scale: bool = True
    # learned per-head score offset for each (query segment, key segment,
    # same panel) class of position pairs; see Denoiser.__init__ for the init
    layout_bias: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def frozen_word_table(vocab_size: int, d_model: int, seed: int) -> np.ndarray:
    """Seeded Gaussian rows, normalized to unit length."""
    table = Rng(seed).child("word-embedding").normal(size=(vocab_size, d_model))
    return table / np.linalg.norm(table, axis=1, keepdims=True)


N_LAYOUT = 18


def _layout_id(seg_q, seg_k, same):
    return 6 * seg_q + 2 * seg_k + same


def layout_classes(fused: FusedSequence) -> np.ndarray:
    """(P, P) class id of each (query, key) pair: 6*seg_q + 2*seg_k + same_panel."""
    seg, panel = fused.segment_ids, fused.panel_ids
    same = (panel[:, None] == panel[None, :]).astype(np.int64)
    return _layout_id(seg[:, None], seg[None, :], same)


class Denoiser(Module):
    def __init__(self, cfg: DenoiserConfig, rng: Rng, alpha_bar: np.ndarray | None = None):
        self.cfg = cfg
        if alpha_bar is None:
            alpha_bar = make_schedule(cfg.T).alpha_bar
        if len(alpha_bar) != cfg.T:
            raise ValueError(f"alpha_bar has {len(alpha_bar)} entries, expected T={cfg.T}")
        self.alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        d = cfg.d_model
        g = rng.gen
        # frozen table doubles as the tied LM head
        self.word_emb = Parameter(frozen_word_table(cfg.vocab_size, d, cfg.embed_seed), frozen=True)
        self.in_proj = Linear(d, d, g)
        self.pos_emb = Embedding(cfg.max_len + 1, d, g, std=1.0)
        self.panel_emb = Embedding(cfg.n_panels, d, g, std=1.0)
        self.seg_emb = Embedding(3, d, g, std=1.0)
        self.time_proj = Linear(d, d, g)
        self.blocks = [TransformerBlock(d, cfg.heads, cfg.ff_mult, g) for _ in range(cfg.n_blocks)]
        if cfg.layout_bias:
            # text queries start with log(L) toward their own panel's feature
            # slots, so each slot gets the prior weight of the whole caption;
            # from zero the text->feature route never forms at desk scale
            init = np.zeros((N_LAYOUT, cfg.heads))
            init[[_layout_id(SEG_TEXT, SEG_VISUAL, True), _layout_id(SEG_TEXT, SEG_GUIDE, True)]] = np.log(cfg.max_len)
            self.layout_tables = [Parameter(init.copy()) for _ in range(cfg.n_blocks)]
        self.ln_f = LayerNorm(d)
        self.out_proj = Linear(d, d, g)
        self.name_parameters()

    def embed_tokens(self, tokens) -> np.ndarray:
        """Ground-truth x0: rows of the frozen table (never changes in training)."""
        return self.word_emb.data[np.asarray(tokens, dtype=np.int64)]

    def predict_x0(self, fused: FusedSequence, t) -> Tensor:
        """x0 estimate for the segment-0 block, shape (B, N, L, d)."""
        B, P, d = fused.embeddings.shape
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
        if np.any(t < 1) or np.any(t > self.cfg.T):
            raise ValueError(f"timestep {t} outside (0, {self.cfg.T}]")
        temb = Tensor(sinusoidal_embedding(t, d))
        x = fused.embeddings
        if self.cfg.io_scale:
            x = x * self.input_scale(fused, t).astype(x.dtype)
        h = self.in_proj(x)
        h = h + self.pos_emb(fused.position_ids) + self.panel_emb(fused.panel_ids) + self.seg_emb(fused.segment_ids)
        h = h + self.time_proj(temb).reshape(B, 1, d)
        mask = fused.attention_mask
        bias = None if mask.all() else attention_bias(mask, dtype=h.dtype)
        biases = [bias] * len(self.blocks)
        if self.cfg.layout_bias:
            # one gather for every block: (nb * heads, P, P), plus the mask bias
            H = self.cfg.heads
            lb = tt.embedding(tt.concat(self.layout_tables, axis=1), layout_classes(fused)).transpose(2, 0, 1)
            if bias is not None:
                lb = lb + bias
            biases = [lb[..., i * H:(i + 1) * H, :, :] for i in range(len(self.blocks))]
        for blk, blk_bias in zip(self.blocks, biases):
            h = blk(h, blk_bias)
        h = self.out_proj(self.ln_f(h))
        if self.cfg.io_scale:
            h = h * float(1.0 / np.sqrt(d))
        return h[:, : fused.n_text].reshape(B, fused.n_panels, fused.max_len, d)

    def input_scale(self, fused: FusedSequence, t: np.ndarray) -> np.ndarray:
        """Per-position multiplier (B, P, 1) giving every input unit variance per coordinate."""
        d = self.cfg.d_model
        ab = self.alpha_bar[np.asarray(t) - 1]
        text = 1.0 / np.sqrt(ab / d + (1.0 - ab))
        B = len(ab)
        scale = np.full((B, fused.embeddings.shape[1], 1), np.sqrt(d))
        scale[:, : fused.n_text, 0] = text[:, None]
        return scale

    def rounding_logits(self, x0_hat) -> Tensor:
        """Tied, frozen LM head: logits = x0_hat @ E^T."""
        x0_hat = tt.as_tensor(x0_hat)
        return x0_hat @ Tensor(self.word_emb.data.T, dtype=x0_hat.dtype)

    def round_to_tokens(self, x0_hat) -> np.ndarray:
        """Argmax over the tied logits; np.argmax breaks ties toward the lowest id."""
        x = x0_hat.data if isinstance(x0_hat, Tensor) else np.asarray(x0_hat)
        logits = x @ self.word_emb.data.T
        return np.argmax(logits, axis=-1)

    def nearest_rows(self, x0_hat: np.ndarray) -> np.ndarray:
        return self.word_emb.data[self.round_to_tokens(x0_hat)].astype(x0_hat.dtype)


def predict_x0(fused: FusedSequence, t, model: Denoiser) -> Tensor:
    return model.predict_x0(fused, t)


def round_to_tokens(x0_hat, model: Denoiser) -> np.ndarray:
    return model.round_to_tokens(x0_hat)


def rounding_logits(x0_hat, model: Denoiser) -> Tensor:
    return model.rounding_logits(x0_hat)
