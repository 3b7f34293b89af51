"""Training objective: L1 restore loss over sampled steps, the x1 term, the
rounding cross-entropy and the dynamic balancing weight lambda."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nncore import Tensor, cross_entropy, l1_loss
from .schedule import NoiseSchedule, TimestepSubset, forward_noise, x0_weight

log = logging.getLogger(__name__)

LAMBDA_MIN, LAMBDA_MAX = 1e-3, 1e3


@dataclass
class LossBreakdown:
    l_restore: float
    l_x1: float
    l_round: float
    lam: float
    l_prime: float = 0.0
    l_final: float = 0.0

    def __post_init__(self):
        self.l_prime = self.l_restore + self.l_x1
        self.l_final = self.l_prime + self.lam * self.l_round

    def row(self) -> dict:
        return {
            "l_restore": self.l_restore,
            "l_x1": self.l_x1,
            "l_round": self.l_round,
            "lambda": self.lam,
            "l_prime": self.l_prime,
            "l_final": self.l_final,
        }


# predict(x_t (R, N, L, d), t (R,), row_index (R,)) -> x0_hat Tensor (R, N, L, d)
Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray], Tensor]


def _weights(t: np.ndarray, sched: NoiseSchedule, c_weighted: bool, dtype) -> np.ndarray | None:
    if not c_weighted:
        return None
    return x0_weight(t, sched).astype(dtype)[:, None, None, None]


def embedding_l1(x0_hat: Tensor, x0: np.ndarray, t: np.ndarray, sched: NoiseSchedule,
                 c_weighted: bool = False, token_mask=None) -> Tensor:
    """Mean |x0_hat - x0| over real positions, optionally scaled by c_t per row.

    With c_weighted the value equals the posterior-mean-space L1
    |mu(x_t, x0_hat) - mu(x_t, x0)| since both means share the x_t term.
    """
    mask = None if token_mask is None else np.asarray(token_mask, dtype=x0.dtype)[..., None]
    w = _weights(t, sched, c_weighted, x0.dtype)
    if w is None:
        return l1_loss(x0_hat, x0, mask)
    return l1_loss(x0_hat * w, x0 * w, mask)


def restore_loss(x0: np.ndarray, ts: np.ndarray, sched: NoiseSchedule, predict: Predictor, rng,
                 c_weighted: bool = False, token_mask=None) -> tuple[Tensor, Tensor]:
    """Restore loss for clean embeddings x0 (B, N, L, d) at timesteps ts.

    ``ts`` is a TimestepSubset (shared by every story), or an int array (B, k)
    of per-story steps.  Every (story, step) pair becomes one row of a single
    batched prediction.  Returns (loss, x0_hat).
    """
    B = x0.shape[0]
    if isinstance(ts, TimestepSubset):
        ts = np.tile(np.asarray(ts.S, dtype=np.int64), (B, 1))
    ts = np.asarray(ts, dtype=np.int64)
    k = ts.shape[1]
    if k < 1:
        raise ValueError("restore_loss needs at least one timestep")
    rows = np.repeat(np.arange(B), k)
    t_flat = ts.reshape(-1)
    x_t, _ = forward_noise(x0[rows], t_flat, sched, rng)
    x0_hat = predict(x_t, t_flat, rows)
    tm = None if token_mask is None else np.asarray(token_mask)[rows]
    return embedding_l1(x0_hat, x0[rows], t_flat, sched, c_weighted, tm), x0_hat


def x1_loss(x0: np.ndarray, sched: NoiseSchedule, predict: Predictor, rng, token_mask=None) -> tuple[Tensor, Tensor]:
    """Restore loss pinned at t = 1, where the posterior target is x0 itself."""
    ts = np.ones((x0.shape[0], 1), dtype=np.int64)
    return restore_loss(x0, ts, sched, predict, rng, False, token_mask)


def rounding_loss(logits: Tensor, target_tokens, token_mask=None) -> Tensor:
    """Mean token NLL through the frozen head; masked positions excluded."""
    return cross_entropy(logits, target_tokens, token_mask)


def update_lambda(l_prime: float, l_round: float, prev: float = 1.0) -> float:
    """lambda = L' / L_R on detached values, clamped to [1e-3, 1e3]."""
    if not l_round > 0 or not np.isfinite(l_round):
        log.warning("rounding loss %r is not positive; keeping lambda=%g", l_round, prev)
        return prev
    return float(min(max(l_prime / l_round, LAMBDA_MIN), LAMBDA_MAX))
