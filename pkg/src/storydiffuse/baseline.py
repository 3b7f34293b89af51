"""Autoregressive baseline: a causal transformer decoder with a visual prefix.

Sequence layout for a story of N panels of L tokens:
``[F_v(0..N-1) | BOS w_0 .. w_{L-2} (panel 0) | ... | BOS .. (panel N-1)]``.
The output at each text position predicts the next token of its panel, so
panel i is conditioned on every image and on all earlier panels' tokens.
Generation is greedy with a key/value cache, one forward pass per token.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import RunConfig
from .dataset import ATTR_DIM, BOS_ID, StorySample, Vocab, to_batch
from .denoiser import frozen_word_table
from .encoders import Backbone, MultimodalEncoder
from .nncore import (
    AdamW,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Rng,
    Tensor,
    TransformerBlock,
    attention_bias,
    concat,
    cosine_annealing_lr,
    cross_entropy,
    default_dtype,
    no_grad,
)
from .nncore import checkpoint as ckpt
from .nncore.tensor import _GELU_C
from .sampler import Generation, polish

log = logging.getLogger(__name__)

SEG_VISUAL, SEG_TEXT = 0, 1


@dataclass
class ARConfig:
    vocab_size: int
    n_panels: int
    max_len: int
    d_model: int = 32
    n_blocks: int = 4
    heads: int = 4
    ff_mult: int = 4
    embed_seed: int = 7

    def to_dict(self) -> dict:
        return asdict(self)


def ar_layout(N: int, L: int):
    """(segment_ids, panel_ids, position_ids) for the N + N*L positions."""
    seg = np.concatenate([np.full(N, SEG_VISUAL), np.full(N * L, SEG_TEXT)])
    panel = np.concatenate([np.arange(N), np.repeat(np.arange(N), L)])
    pos = np.concatenate([np.full(N, L), np.tile(np.arange(L), N)])
    return seg, panel, pos


def own_visual(N: int, L: int) -> np.ndarray:
    """(P, P) mask of (text query, key = its own panel's visual slot) pairs."""
    seg, panel, _ = ar_layout(N, L)
    return (seg[:, None] == SEG_TEXT) & (seg[None, :] == SEG_VISUAL) & (panel[:, None] == panel[None, :])


def teacher_inputs(tokens: np.ndarray) -> np.ndarray:
    """Shift each panel right by one and put BOS in front: (B, N, L) -> (B, N, L)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    out = np.empty_like(tokens)
    out[..., 0] = BOS_ID
    out[..., 1:] = tokens[..., :-1]
    return out


class ARDecoder(Module):
    def __init__(self, cfg: ARConfig, rng: Rng):
        self.cfg = cfg
        d = cfg.d_model
        g = rng.gen
        self.word_emb = Parameter(frozen_word_table(cfg.vocab_size, d, cfg.embed_seed), frozen=True)
        self.in_proj = Linear(d, d, g)
        self.pos_emb = Embedding(cfg.max_len + 1, d, g)
        self.panel_emb = Embedding(cfg.n_panels, d, g)
        self.seg_emb = Embedding(2, d, g, std=0.5)
        self.blocks = [TransformerBlock(d, cfg.heads, cfg.ff_mult, g) for _ in range(cfg.n_blocks)]
        # per-head score offset toward the panel's own visual slot, with the
        # same log(L) prior as the diffusion denoiser's layout bias
        self.visual_gain = [Parameter(np.full((cfg.heads, 1, 1), np.log(cfg.max_len))) for _ in range(cfg.n_blocks)]
        self.ln_f = LayerNorm(d)
        self.out_proj = Linear(d, d, g)
        self.name_parameters()

    @property
    def scale(self) -> float:
        return float(np.sqrt(self.cfg.d_model))

    def logits(self, F_v: Tensor, inputs: np.ndarray) -> Tensor:
        """Teacher-forced logits (B, N, L, V) for shifted inputs (B, N, L)."""
        B, N, L = inputs.shape
        tok = Tensor(self.word_emb.data[inputs.reshape(B, N * L)], dtype=F_v.dtype)
        x = concat([F_v, tok], axis=1)
        seg, panel, pos = ar_layout(N, L)
        h = self.in_proj(x * self.scale) + self.pos_emb(pos) + self.panel_emb(panel) + self.seg_emb(seg)
        causal = Tensor(attention_bias(causal_len=N + N * L, dtype=h.dtype))
        own = Tensor(own_visual(N, L).astype(h.dtype))
        for blk, gain in zip(self.blocks, self.visual_gain):
            h = blk(h, gain * own + causal)
        h = self.out_proj(self.ln_f(h))[:, N:]
        out = h @ Tensor(self.word_emb.data.T, dtype=h.dtype)
        return out.reshape(B, N, L, self.cfg.vocab_size)


class ARSystem(Module):
    """Image encoder + causal decoder, checkpointed like the diffusion system."""

    model_type = "ar"

    def __init__(self, cfg: RunConfig, vocab_size: int):
        self.cfg = cfg
        m = cfg.model
        with default_dtype(cfg.train.dtype):
            backbone = Backbone(ATTR_DIM, vocab_size, m.d_feat, m.backbone_seed)
            self.encoder = MultimodalEncoder(backbone, m.d_model, m.use_adapters)
            acfg = ARConfig(vocab_size, cfg.corpus.n_panels, cfg.corpus.max_len, m.d_model, m.n_blocks,
                            m.heads, m.ff_mult, m.embed_seed)
            self.decoder = ARDecoder(acfg, Rng(cfg.seed).child("ar-init"))
        self.name_parameters()

    @property
    def dtype(self):
        return np.dtype(self.cfg.train.dtype)

    def manifest(self) -> dict:
        return {
            "model_type": self.model_type,
            "backbone": self.encoder.backbone.manifest(),
            "decoder": self.decoder.cfg.to_dict(),
            "use_adapters": self.encoder.use_adapters,
            "frozen": sorted(n for n, p in self.named_parameters() if p.frozen),
            "run_config": self.cfg.to_dict(),
        }

    def save(self, path) -> None:
        ckpt.save_checkpoint(path, self, self.manifest())

    @classmethod
    def load(cls, path) -> "ARSystem":
        meta = ckpt.load_meta(path)
        system = cls(RunConfig.from_dict(meta["run_config"]), int(meta["decoder"]["vocab_size"]))
        ckpt.load_checkpoint(path, system)
        return system


@dataclass
class ARHistory:
    losses: list[float] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)
    seconds: float = 0.0


def ar_loss(system: ARSystem, attrs: np.ndarray, tokens: np.ndarray) -> Tensor:
    F_v = system.encoder.image_features(attrs=attrs)
    logits = system.decoder.logits(F_v, teacher_inputs(tokens))
    return cross_entropy(logits, np.asarray(tokens, dtype=np.int64))


def ar_train(cfg: RunConfig, stories: list[StorySample], vocab: Vocab, log_path=None,
             progress=None) -> tuple[ARSystem, ARHistory]:
    """Teacher-forced next-token NLL with the diffusion run's optimizer and schedule."""
    tc = cfg.train
    system = ARSystem(cfg, len(vocab))
    batch = to_batch(stories, vocab, cfg.corpus.max_len)
    hist = ARHistory()
    n = len(stories)
    steps_per_epoch = max(1, -(-n // tc.batch_size))
    total = steps_per_epoch * tc.epochs
    rng = Rng(cfg.seed).child("ar-train").child("shuffle")
    t0 = time.perf_counter()
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "nll", "lr"])
    step = 0
    try:
        with default_dtype(tc.dtype):
            img = system.encoder.backbone.encode_image(batch.attrs).astype(system.dtype)
            opt = AdamW(system.trainable_parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
            for epoch in range(tc.epochs):
                perm = rng.permutation(n)
                total_loss = 0.0
                for s in range(steps_per_epoch):
                    idx = perm[s * tc.batch_size : (s + 1) * tc.batch_size]
                    lr = cosine_annealing_lr(step, total, tc.lr, tc.lr_min)
                    opt.zero_grad()
                    F_v = system.encoder.image_features(backbone_feat=img[idx])
                    logits = system.decoder.logits(F_v, teacher_inputs(batch.tokens[idx]))
                    loss = cross_entropy(logits, batch.tokens[idx])
                    loss.backward()
                    opt.step(lr)
                    system.encoder.clamp()
                    step += 1
                    val = float(loss.data)
                    hist.losses.append(val)
                    total_loss += val
                    if writer:
                        writer.writerow([step, repr(val), repr(lr)])
                hist.epoch_means.append(total_loss / steps_per_epoch)
                if progress:
                    progress(epoch, {"nll": hist.epoch_means[-1]})
                log.info("ar epoch %d nll %.4f", epoch + 1, hist.epoch_means[-1])
    finally:
        if fh:
            fh.close()
    hist.seconds = time.perf_counter() - t0
    return system, hist


# Inference runs on raw arrays with a key/value cache: no tape, no wrappers.


def _ln(x, ln: LayerNorm):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + ln.eps) * ln.gamma.data + ln.beta.data


def _lin(x, lin: Linear):
    y = x @ lin.weight.data
    return y + lin.bias.data if lin.bias is not None else y


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * (x * x))))


class _Cache:
    def __init__(self, n_blocks: int, B: int, heads: int, cap: int, hd: int, dtype):
        self.k = [np.zeros((B, heads, cap, hd), dtype=dtype) for _ in range(n_blocks)]
        self.v = [np.zeros((B, heads, cap, hd), dtype=dtype) for _ in range(n_blocks)]
        self.len = 0


def _step(dec: ARDecoder, x: np.ndarray, cache: _Cache, own: np.ndarray) -> np.ndarray:
    """Run positions x (B, s, d) after the cached prefix; returns final hidden (B, s, d).

    ``own`` is the full-sequence :func:`own_visual` mask.
    """
    B, s, d = x.shape
    H = dec.cfg.heads
    hd = d // H
    start = cache.len
    end = start + s
    scale = float(1.0 / np.sqrt(hd))
    causal = None
    if s > 1:
        causal = np.triu(np.full((s, end), -1e9, dtype=x.dtype), k=start + 1)
    own = own[start:end, :end].astype(x.dtype)
    h = x
    for i, blk in enumerate(dec.blocks):
        a = _ln(h, blk.ln1)
        q = _lin(a, blk.attn.q).reshape(B, s, H, hd).transpose(0, 2, 1, 3)
        cache.k[i][:, :, start:end] = _lin(a, blk.attn.k).reshape(B, s, H, hd).transpose(0, 2, 1, 3)
        cache.v[i][:, :, start:end] = _lin(a, blk.attn.v).reshape(B, s, H, hd).transpose(0, 2, 1, 3)
        sc = (q @ cache.k[i][:, :, :end].swapaxes(-1, -2)) * scale
        sc = sc + dec.visual_gain[i].data.astype(x.dtype) * own
        if causal is not None:
            sc = sc + causal
        sc = sc - sc.max(axis=-1, keepdims=True)
        e = np.exp(sc)
        att = e / e.sum(axis=-1, keepdims=True)
        ctx = (att @ cache.v[i][:, :, :end]).transpose(0, 2, 1, 3).reshape(B, s, d)
        h = h + _lin(ctx, blk.attn.o)
        h = h + _lin(_gelu(_lin(_ln(h, blk.ln2), blk.ff.fc1)), blk.ff.fc2)
    cache.len = end
    return _lin(_ln(h, dec.ln_f), dec.out_proj)


def ar_generate(system: ARSystem, attrs, max_len: int | None = None) -> Generation:
    """Greedy decoding of ``max_len`` tokens per panel, panels in order.

    One forward pass per generated token (the first shares its pass with the
    visual prefix), so forward_passes = N * max_len.
    """
    attrs = np.asarray(attrs, dtype=np.float64)
    if attrs.ndim == 2:
        attrs = attrs[None]
    B, N, _ = attrs.shape
    dec = system.decoder
    L = dec.cfg.max_len if max_len is None else max_len
    if L > dec.cfg.max_len:
        raise ValueError(f"max_len {L} exceeds the trained length {dec.cfg.max_len}")
    d = dec.cfg.d_model
    dtype = system.dtype
    sc = dec.scale
    W = dec.word_emb.data.astype(dtype)
    t0 = time.perf_counter()
    with default_dtype(dtype), no_grad():
        F_v = system.encoder.image_features(attrs=attrs).data.astype(dtype)
    pos_w, panel_w, seg_w = dec.pos_emb.weight.data, dec.panel_emb.weight.data, dec.seg_emb.weight.data
    cache = _Cache(len(dec.blocks), B, dec.cfg.heads, N + N * L, d // dec.cfg.heads, dtype)

    def embed(vecs, panel, pos, seg):
        return _lin(vecs * sc, dec.in_proj) + pos_w[pos] + panel_w[panel] + seg_w[seg]

    out = np.zeros((B, N, L), dtype=np.int64)
    passes = 0
    prefix = embed(F_v, np.arange(N), np.full(N, dec.cfg.max_len), np.full(N, SEG_VISUAL))
    pending = prefix
    own = own_visual(N, L)
    for p in range(N):
        prev = np.full(B, BOS_ID)
        for j in range(L):
            x = embed(W[prev][:, None, :], p, j, SEG_TEXT)
            x = x if pending is None else np.concatenate([pending, x], axis=1)
            pending = None
            h = _step(dec, x.astype(dtype), cache, own)[:, -1]
            passes += 1
            prev = np.argmax(h @ W.T, axis=-1)
            out[:, p, j] = prev
    panels = [[polish(out[b, n]) for n in range(N)] for b in range(B)]
    return Generation(out, panels, passes, time.perf_counter() - t0)
