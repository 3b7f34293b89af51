"""Non-autoregressive story generation by iterative x0 denoising."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import BOS_ID, PAD_ID
from .fusion import GuidanceConfig, cfg_combine, fuse
from .nncore import Rng, Tensor, default_dtype, no_grad
from .schedule import forward_noise, inference_timesteps

SOURCES = ("none", "teacher")
RULES = ("renoise", "posterior")


@dataclass
class SamplerConfig:
    steps: int = 30
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    text_guidance_source: str = "none"
    seed: int = 0
    rule: str = "renoise"
    clamp: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler needs steps >= 1")
        if self.text_guidance_source not in SOURCES:
            raise ValueError(f"text_guidance_source must be one of {SOURCES}")
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}")

    @property
    def two_branch(self) -> bool:
        return self.text_guidance_source == "teacher" and self.guidance.w != 0


@dataclass
class Generation:
    raw_tokens: np.ndarray  # (B, N, L) rounded ids before polishing
    panels: list[list[list[int]]]  # per story, per panel polished ids
    forward_passes: int  # per story
    seconds: float = 0.0


def unique_consecutive(tokens: Sequence[int]) -> list[int]:
    out: list[int] = []
    for tok in tokens:
        if not out or out[-1] != tok:
            out.append(tok)
    return out


def polish(ids) -> list[int]:
    """Strip padding, then collapse runs of repeated words."""
    return unique_consecutive([int(i) for i in ids if int(i) not in (PAD_ID, BOS_ID)])


def _posterior_step(x, x0_hat, s, s_next, sched, eps):
    """Sample q(x_{s_next} | x_s, x0_hat) for s_next < s (skip-step DDPM posterior)."""
    ab_s, ab_n = sched.ab(s), sched.ab(s_next)
    a_ratio = ab_s / ab_n
    c0 = np.sqrt(ab_n) * (1.0 - a_ratio) / (1.0 - ab_s)
    ct = np.sqrt(a_ratio) * (1.0 - ab_n) / (1.0 - ab_s)
    var = (1.0 - ab_n) / (1.0 - ab_s) * (1.0 - a_ratio)
    return c0 * x0_hat + ct * x + np.sqrt(var) * eps


def generate(system, attrs, cfg: SamplerConfig, story_keys: Sequence[str] | None = None,
             teacher_tokens=None) -> Generation:
    """Generate every panel of every story in ``attrs`` (B, N, A) in parallel.

    ``story_keys`` name each story's noise substream so a story's output does
    not depend on what else is in the batch.  ``teacher_tokens`` (B, N, L)
    supply ground-truth text features for the evaluation-only teacher mode.
    """
    attrs = np.asarray(attrs, dtype=np.float64)
    if attrs.ndim == 2:
        attrs = attrs[None]
    B, N, _ = attrs.shape
    den = system.denoiser
    sched = system.schedule
    L, d = den.cfg.max_len, den.cfg.d_model
    dtype = system.dtype
    keys = list(story_keys) if story_keys is not None else [str(i) for i in range(B)]
    root = Rng(cfg.seed).child("sample")
    streams = [root.child(k) for k in keys]

    def noise(shape_tail):
        return np.stack([r.normal(size=shape_tail) for r in streams]).astype(dtype)

    grid = inference_timesteps(sched.T, cfg.steps).S
    t0 = time.perf_counter()
    passes = 0
    with default_dtype(dtype), no_grad():
        F_v = system.encoder.image_features(attrs=attrs)
        zeros = Tensor(np.zeros((B, N, d), dtype=dtype))
        if cfg.text_guidance_source == "teacher":
            if teacher_tokens is None:
                raise ValueError("teacher guidance needs teacher_tokens")
            F_t = system.encoder.text_features(tokens=teacher_tokens)
            masked = False
        else:
            F_t, masked = zeros, True

        x = noise((N, L, d))
        x0_hat = None
        for i, s in enumerate(grid):
            est = den.predict_x0(fuse(x, F_v, F_t, masked), s).data
            passes += 1
            if cfg.two_branch:
                unc = den.predict_x0(fuse(x, F_v, zeros, True), s).data
                passes += 1
                est = cfg_combine(est, unc, cfg.guidance.w)
            if cfg.clamp:
                est = den.nearest_rows(est)
            x0_hat = est
            if i + 1 < len(grid):
                s_next = grid[i + 1]
                eps = noise((N, L, d))
                if cfg.rule == "renoise":
                    x, _ = forward_noise(x0_hat, s_next, sched, eps=eps)
                else:
                    x = _posterior_step(x, x0_hat, s, s_next, sched, eps)
                x = x.astype(dtype)
    raw = den.round_to_tokens(x0_hat)
    panels = [[polish(raw[b, n]) for n in range(N)] for b in range(B)]
    return Generation(raw, panels, passes, time.perf_counter() - t0)


@dataclass
class TimingReport:
    mean_seconds: float
    std_seconds: float
    n_samples: int
    forward_passes: int
    steps: int | None = None


def benchmark_generate(stories_attrs: Sequence[np.ndarray], gen_one: Callable[[np.ndarray], Generation],
                       warmup: int = 3, steps: int | None = None) -> TimingReport:
    """Wall-clock per story (one story per call), excluding ``warmup`` runs."""
    if warmup < 3:
        raise ValueError("benchmark needs at least 3 warm-up runs")
    for i in range(warmup):
        gen_one(stories_attrs[i % len(stories_attrs)])
    times, passes = [], 0
    for a in stories_attrs:
        t = time.perf_counter()
        g = gen_one(a)
        times.append(time.perf_counter() - t)
        passes = g.forward_passes
    std = statistics.pstdev(times) if len(times) > 1 else 0.0
    return TimingReport(statistics.fmean(times), std, len(times), passes, steps)
