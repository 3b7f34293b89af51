"""Training loop for the diffusion storyteller and run-directory persistence."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataset import ATTR_DIM, PAD_ID, StorySample, Vocab, to_batch
from .denoiser import Denoiser, DenoiserConfig
from .encoders import Backbone, MultimodalEncoder
from .fusion import draw_unguide_mask, fuse
from .loss import LossBreakdown, embedding_l1, rounding_loss, update_lambda
from .nncore import AdamW, Module, Rng, Tensor, cosine_annealing_lr, default_dtype
from .nncore import checkpoint as ckpt
from .schedule import NoiseSchedule, forward_noise, make_schedule, sample_timestep_subset

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "l_restore", "l_x1", "l_round", "lambda", "l_final", "lr"]


class DiffusionSystem(Module):
    """Encoders + denoiser + schedule: everything generation needs."""

    model_type = "diffusion"

    def __init__(self, cfg: RunConfig, vocab_size: int):
        self.cfg = cfg
        m = cfg.model
        self.schedule: NoiseSchedule = make_schedule(
            cfg.schedule.T, cfg.schedule.kind, cfg.schedule.beta_start, cfg.schedule.beta_end
        )
        with default_dtype(cfg.train.dtype):
            backbone = Backbone(ATTR_DIM, vocab_size, m.d_feat, m.backbone_seed)
            self.encoder = MultimodalEncoder(backbone, m.d_model, m.use_adapters)
            dcfg = DenoiserConfig(
                vocab_size=vocab_size,
                n_panels=cfg.corpus.n_panels,
                max_len=cfg.corpus.max_len,
                T=cfg.schedule.T,
                d_model=m.d_model,
                n_blocks=m.n_blocks,
                heads=m.heads,
                ff_mult=m.ff_mult,
                embed_seed=m.embed_seed,
                io_scale=m.io_scale,
                layout_bias=m.layout_bias,
            )
            self.denoiser = Denoiser(dcfg, Rng(cfg.seed).child("init"), self.schedule.alpha_bar)
        self.name_parameters()

    @property
    def dtype(self):
        return np.dtype(self.cfg.train.dtype)

    def manifest(self) -> dict:
        return {
            "model_type": self.model_type,
            "schedule": self.schedule.to_manifest(),
            "backbone": self.encoder.backbone.manifest(),
            "denoiser": self.denoiser.cfg.to_dict(),
            "use_adapters": self.encoder.use_adapters,
            "frozen": sorted(n for n, p in self.named_parameters() if p.frozen),
            "run_config": self.cfg.to_dict(),
        }

    def save(self, path) -> None:
        ckpt.save_checkpoint(path, self, self.manifest())

    @classmethod
    def load(cls, path) -> "DiffusionSystem":
        meta = ckpt.load_meta(path)
        cfg = RunConfig.from_dict(meta["run_config"])
        system = cls(cfg, int(meta["denoiser"]["vocab_size"]))
        ckpt.load_checkpoint(path, system)
        return system


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)
    lambda_next: list[float] = field(default_factory=list)
    epoch_means: list[dict] = field(default_factory=list)
    seconds: float = 0.0


class DiffusionTrainer:
    """One optimizer step per batch of stories.

    The restore term draws a random subset S of |S| = t_prime steps per story
    and scores ``steps_per_story`` of them (all by default); the x1 term uses
    an independent noise draw.  All predictions of a step share one batched
    forward pass.
    """

    def __init__(self, system: DiffusionSystem, stories: list[StorySample], vocab: Vocab):
        self.system = system
        self.cfg = system.cfg
        tc = self.cfg.train
        self.batch = to_batch(stories, vocab, self.cfg.corpus.max_len)
        bb = system.encoder.backbone
        self.img_feat = bb.encode_image(self.batch.attrs).astype(system.dtype)
        self.txt_feat = bb.encode_text(self.batch.tokens).astype(system.dtype)
        self.x0_all = system.denoiser.embed_tokens(self.batch.tokens).astype(system.dtype)
        self.params = system.trainable_parameters()
        self.opt = AdamW(self.params, lr=tc.lr, weight_decay=tc.weight_decay)
        self.lam = 1.0
        n = len(stories)
        self.steps_per_epoch = max(1, -(-n // tc.batch_size))
        self.total_steps = self.steps_per_epoch * tc.epochs
        self.step_count = 0
        root = Rng(self.cfg.seed).child("train")
        self.rng_shuffle = root.child("shuffle")
        self.rng_subset = root.child("subset")
        self.rng_noise = root.child("noise")
        self.rng_x1 = root.child("x1")
        self.rng_unguide = root.child("unguide")

    def _timesteps(self, B: int) -> np.ndarray:
        tc = self.cfg.train
        T = self.system.schedule.T
        k = tc.steps_per_story or tc.t_prime
        out = np.empty((B, k), dtype=np.int64)
        for b in range(B):
            S = np.asarray(sample_timestep_subset(T, tc.t_prime, self.rng_subset).S)
            out[b] = S if k == len(S) else S[np.sort(self.rng_subset.choice(len(S), size=k, replace=False))]
        return out

    def loss_on(self, idx: np.ndarray) -> tuple[Tensor, LossBreakdown]:
        sys_, tc = self.system, self.cfg.train
        sched = sys_.schedule
        B = len(idx)
        tokens = self.batch.tokens[idx]
        x0 = self.x0_all[idx]
        token_mask = None if tc.pad_is_content else tokens != PAD_ID
        masked = draw_unguide_mask(self.cfg.guidance.p_unguide, self.rng_unguide, B)
        F_v = sys_.encoder.image_features(backbone_feat=self.img_feat[idx])
        F_t = sys_.encoder.text_features(backbone_feat=self.txt_feat[idx])

        ts = self._timesteps(B)
        k = ts.shape[1]
        rows_r = np.repeat(np.arange(B), k)
        t_r = ts.reshape(-1)
        x_r, _ = forward_noise(x0[rows_r], t_r, sched, self.rng_noise)
        x_1, _ = forward_noise(x0, 1, sched, self.rng_x1)
        rows = np.concatenate([rows_r, np.arange(B)])
        t_all = np.concatenate([t_r, np.ones(B, dtype=np.int64)])
        x_all = np.concatenate([x_r, x_1]).astype(sys_.dtype)
        tm = None if token_mask is None else token_mask[rows]
        fused = fuse(Tensor(x_all), F_v[rows], F_t[rows], masked[rows], tm)
        x0_hat = sys_.denoiser.predict_x0(fused, t_all)

        R = len(rows_r)
        l_restore = embedding_l1(x0_hat[:R], x0[rows_r], t_r, sched, tc.c_weighted,
                                 None if tm is None else tm[:R])
        l_x1 = embedding_l1(x0_hat[R:], x0, np.ones(B, dtype=np.int64), sched, False,
                            None if tm is None else tm[R:])
        l_round = rounding_loss(sys_.denoiser.rounding_logits(x0_hat), tokens[rows], tm)
        l_final = l_restore + l_x1 + l_round * float(self.lam)
        br = LossBreakdown(float(l_restore.data), float(l_x1.data), float(l_round.data), float(self.lam))
        return l_final, br

    def step(self, idx: np.ndarray) -> tuple[LossBreakdown, float]:
        tc = self.cfg.train
        lr = cosine_annealing_lr(self.step_count, self.total_steps, tc.lr, tc.lr_min)
        self.opt.zero_grad()
        l_final, br = self.loss_on(idx)
        l_final.backward()
        self.opt.step(lr)
        self.system.encoder.clamp()
        self.step_count += 1
        self.lam = update_lambda(br.l_prime, br.l_round, self.lam)
        return br, lr

    def fit(self, log_path=None, progress=None) -> TrainHistory:
        tc = self.cfg.train
        hist = TrainHistory()
        t0 = time.perf_counter()
        writer = fh = None
        if log_path is not None:
            fh = open(log_path, "w", newline="", encoding="utf-8")
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
            writer.writeheader()
        try:
            n = len(self.batch.story_ids)
            for epoch in range(tc.epochs):
                perm = self.rng_shuffle.permutation(n)
                sums = np.zeros(3)
                for s in range(self.steps_per_epoch):
                    idx = perm[s * tc.batch_size : (s + 1) * tc.batch_size]
                    br, lr = self.step(idx)
                    row = {"step": self.step_count, "lr": lr, **br.row()}
                    hist.rows.append(row)
                    hist.lambda_next.append(self.lam)
                    sums += (br.l_restore, br.l_x1, br.l_round)
                    if writer:
                        writer.writerow({k: row[k] for k in LOG_FIELDS})
                means = dict(zip(("l_restore", "l_x1", "l_round"), (sums / self.steps_per_epoch).tolist()))
                hist.epoch_means.append(means)
                if progress:
                    progress(epoch, means)
                log.info("epoch %d %s", epoch + 1, means)
        finally:
            if fh:
                fh.close()
        hist.seconds = time.perf_counter() - t0
        return hist


def train_diffusion(cfg: RunConfig, stories: list[StorySample], vocab: Vocab, log_path=None, progress=None):
    system = DiffusionSystem(cfg, len(vocab))
    with default_dtype(cfg.train.dtype):
        trainer = DiffusionTrainer(system, stories, vocab)
        hist = trainer.fit(log_path, progress)
    return system, hist
