"""Noise schedules, forward noising, posterior means and timestep subsets.

Timesteps are 1-based: ``beta[t]`` for ``t in 1..T`` lives at array index
``t - 1``.  ``alpha_bar(0)`` is defined as 1 (clean data).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import Rng
from .nncore.layers import ConfigError

SCHEDULE_KINDS = ("linear", "sqrt")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kind: str
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    # 1 - alpha_bar without cancellation, for tiny betas
    one_minus_ab: np.ndarray

    def _check(self, t: int) -> None:
        if not 1 <= int(t) <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def ab(self, t) -> np.ndarray:
        """alpha_bar at (possibly array-valued) 1-based t, with ab(0) = 1."""
        t = np.asarray(t, dtype=np.int64)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def omab(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        return np.concatenate([[0.0], self.one_minus_ab])[t]

    def to_manifest(self) -> dict:
        return {"kind": self.kind, "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_manifest(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(int(d["T"]), d["kind"], float(d["beta_start"]), float(d["beta_end"]))


def make_schedule(T: int = 1000, kind: str = "linear", beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"schedule: T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"schedule: need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    elif kind == "sqrt":
        # sqrt-shaped ramp: fast early noise growth, typical for text embeddings
        u = np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)
        beta = beta_start + (beta_end - beta_start) * np.sqrt(u)
    else:
        raise ConfigError(f"schedule: unknown kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    beta = beta.astype(np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.empty_like(alpha)
    acc = 1.0
    for i, a in enumerate(alpha):
        acc = acc * a
        alpha_bar[i] = acc
    one_minus_ab = -np.expm1(np.cumsum(np.log1p(-beta)))
    return NoiseSchedule(T, kind, float(beta_start), float(beta_end), beta, alpha, alpha_bar, one_minus_ab)


def forward_noise(x0, t, sched: NoiseSchedule, rng: Rng | None = None, eps=None):
    """Sample x_t ~ q(x_t | x0) = N(sqrt(ab_t) x0, (1 - ab_t) I).

    ``t`` is an int or an array broadcast over the leading axis of ``x0``.
    Pass ``eps`` to fix the noise (e.g. zeros for the deterministic branch).
    Returns ``(x_t, eps)`` as numpy arrays.
    """
    x0 = np.asarray(x0)
    t_arr = np.asarray(t, dtype=np.int64)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    if eps is None:
        if rng is None:
            raise ValueError("forward_noise needs rng or eps")
        eps = rng.normal(size=x0.shape)
    eps = np.asarray(eps, dtype=np.float64)
    ab = sched.ab(t_arr)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return x_t.astype(x0.dtype if x0.dtype.kind == "f" else np.float64), eps


def posterior_coefficients(t, sched: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Weights (c0, ct) with mu = c0 * x0 + ct * x_t for q(x_{t-1} | x_t, x0).

    t = 1 gives (1, 0): the previous state of step 1 is the data itself.
    """
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    ab_prev = sched.ab(t - 1)
    om_t, om_prev = sched.omab(t), sched.omab(t - 1)
    beta = sched.beta[t - 1]
    alpha = sched.alpha[t - 1]
    c0 = np.sqrt(ab_prev) * beta / om_t
    ct = np.sqrt(alpha) * om_prev / om_t
    c0 = np.where(t == 1, 1.0, c0)
    ct = np.where(t == 1, 0.0, ct)
    return c0, ct


def posterior_mean(x_t, x0, t, sched: NoiseSchedule):
    """Mean of q(x_{t-1} | x_t, x0); works on numpy arrays or Tensors."""
    c0, ct = posterior_coefficients(t, sched)
    lead = np.ndim(c0)
    if lead:
        nd = len(x0.shape)
        c0 = c0.reshape(c0.shape + (1,) * (nd - lead))
        ct = ct.reshape(ct.shape + (1,) * (nd - lead))
    dtype = x0.dtype if hasattr(x0, "dtype") else np.float64
    c0 = np.asarray(c0, dtype=dtype)
    ct = np.asarray(ct, dtype=dtype)
    return x0 * c0 + x_t * ct


def posterior_variance(t, sched: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    return np.where(t == 1, 0.0, sched.beta[t - 1] * sched.omab(t - 1) / sched.omab(t))


def x0_weight(t, sched: NoiseSchedule) -> np.ndarray:
    """c_t such that |mu(x_t, x0_hat) - mu(x_t, x0)| = c_t |x0_hat - x0|."""
    return posterior_coefficients(t, sched)[0]


@dataclass(frozen=True)
class TimestepSubset:
    S: tuple[int, ...]

    @property
    def T_prime(self) -> int:
        return len(self.S)

    def __iter__(self):
        return iter(self.S)

    def __len__(self) -> int:
        return len(self.S)


def sample_timestep_subset(T: int, T_prime: int, rng: Rng) -> TimestepSubset:
    """T_prime distinct steps drawn uniformly from 1..T, sorted descending."""
    if not 1 <= T_prime <= T:
        raise ValueError(f"subset size {T_prime} outside [1, {T}]")
    draw = rng.choice(T, size=T_prime, replace=False) + 1
    return TimestepSubset(tuple(int(s) for s in sorted(draw.tolist(), reverse=True)))


def inference_timesteps(T: int, steps: int) -> TimestepSubset:
    """Evenly spaced descending steps from T down to 1 (just [T] when steps=1)."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps {steps} outside [1, {T}]")
    if steps == 1:
        return TimestepSubset((T,))
    grid = np.rint(np.linspace(T, 1, steps)).astype(int)
    return TimestepSubset(tuple(int(s) for s in grid))
