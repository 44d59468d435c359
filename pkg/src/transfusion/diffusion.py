"""DDPM numerics: cosine schedule, forward noising, ancestral steps, CFG.

Arrays are numpy; index 0 of every ``alpha_bar`` table means "clean".
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_BETA = 0.999
SIGMA_RULES = ("posterior", "beta")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # (T + 1,)
    beta: np.ndarray  # (T,), beta[t - 1] is the step into timestep t
    offset_s: float

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "beta", "alpha_bar"])
        writer.writerow([0, "", repr(float(self.alpha_bar[0]))])
        for t in range(1, self.T + 1):
            writer.writerow([t, repr(float(self.beta[t - 1])), repr(float(self.alpha_bar[t]))])
        return buf.getvalue()


@dataclass(frozen=True)
class SamplerControls:
    cfg_weight: float = 3.0
    num_steps: int = 250
    sigma_rule: str = "posterior"
    seed: int = 0
    temperature: float = 0.0
    top_p: float = 1.0
    # clamp for the implied clean latent; raw pixel latents live in [-1, 1]
    clip_x0: float | None = 1.0

    def __post_init__(self):
        if self.clip_x0 is not None and self.clip_x0 <= 0:
            raise ValueError("clip_x0 must be positive or None")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.cfg_weight < 0:
            raise ValueError("cfg_weight must be >= 0")
        if self.sigma_rule not in SIGMA_RULES:
            raise ValueError(f"sigma_rule must be one of {SIGMA_RULES}")


def make_cosine_schedule(T: int, s: float = 0.008) -> NoiseSchedule:
    """Cosine schedule with offset ``s`` and betas clipped at 0.999.

    ``alpha_bar`` is the running product of ``1 - beta`` so that the table
    stays consistent with the clipped betas at the end of the horizon.
    """
    if T < 1 or int(T) != T:
        raise ValueError(f"T must be a positive integer, got {T}")
    if s < 0:
        raise ValueError(f"offset must be >= 0, got {s}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + s) / (1 + s)) * math.pi / 2) ** 2
    ratio = f[1:] / f[:-1]
    beta = np.minimum(1.0 - ratio, MAX_BETA)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(int(T), alpha_bar, beta, float(s))


def _check_t(t: int, sched: NoiseSchedule, lo: int = 0) -> None:
    if not lo <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [{lo}, {sched.T}]")


def add_noise(x0, t: int, eps, sched: NoiseSchedule):
    if np.shape(x0) != np.shape(eps):
        raise ValueError(f"shape mismatch: {np.shape(x0)} vs {np.shape(eps)}")
    _check_t(t, sched)
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def ddpm_loss(eps_pred, eps) -> float:
    eps_pred, eps = np.asarray(eps_pred), np.asarray(eps)
    if eps_pred.shape != eps.shape:
        raise ValueError(f"shape mismatch: {eps_pred.shape} vs {eps.shape}")
    return float(np.mean((eps - eps_pred) ** 2))


def denoise_step(x_t, eps_pred, t: int, sched: NoiseSchedule, sigma_rule: str = "posterior",
                 rng: np.random.Generator | None = None, t_prev: int | None = None,
                 clip_x0: float | None = None):
    """One ancestral step from ``t`` to ``t_prev`` (default ``t - 1``).

    Skipped steps use the effective beta ``1 - alpha_bar[t] / alpha_bar[t_prev]``.
    No noise is injected when landing on ``t_prev == 0``.

    With ``clip_x0`` the implied clean estimate is clamped to ``[-clip_x0, clip_x0]``
    and the mean is rebuilt from it. Without clamping both forms agree exactly.
    """
    if t < 1:
        raise ValueError("cannot denoise from t = 0")
    _check_t(t, sched, lo=1)
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev must lie in [0, {t}), got {t_prev}")
    ab_t, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    beta = 1.0 - ab_t / ab_prev
    if clip_x0 is None:
        mean = (x_t - (beta / math.sqrt(1.0 - ab_t)) * eps_pred) / math.sqrt(1.0 - beta)
    else:
        x0 = np.clip((x_t - math.sqrt(1.0 - ab_t) * eps_pred) / math.sqrt(ab_t), -clip_x0, clip_x0)
        mean = (math.sqrt(ab_prev) * beta / (1.0 - ab_t)) * x0 \
            + (math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)) * x_t
    if t_prev == 0:
        return mean
    if sigma_rule == "posterior":
        var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    elif sigma_rule == "beta":
        var = beta
    else:
        raise ValueError(f"unknown sigma rule {sigma_rule!r}")
    if rng is None:
        raise ValueError("rng required for a stochastic step")
    z = rng.standard_normal(np.shape(x_t))
    return mean + math.sqrt(var) * z


def cfg_combine(eps_cond, eps_uncond, w: float):
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ValueError(f"shape mismatch: {np.shape(eps_cond)} vs {np.shape(eps_uncond)}")
    if w < 0:
        raise ValueError("guidance weight must be >= 0")
    if w == 1:
        return eps_cond
    if w == 0:
        return eps_uncond
    return eps_uncond + w * (eps_cond - eps_uncond)


def sample_timestep(rng: np.random.Generator, T: int, limit: int | None = None) -> int:
    hi = T if limit is None else limit
    if not 1 <= hi <= T:
        raise ValueError(f"noise limit must lie in [1, {T}], got {limit}")
    return int(rng.integers(1, hi + 1))


def make_inference_timesteps(T: int, num_steps: int) -> list[int]:
    """Evenly strided ladder ``round(T * i / num_steps)`` for ``i = num_steps..1``.

    Rounds half up; duplicates are dropped.
    """
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must lie in [1, {T}], got {num_steps}")
    ladder: list[int] = []
    for i in range(num_steps, 0, -1):
        t = max(1, int(math.floor(T * i / num_steps + 0.5)))
        if not ladder or t < ladder[-1]:
            ladder.append(t)
    return ladder


def ladder_pairs(ladder: Sequence[int]) -> list[tuple[int, int]]:
    """``(t, t_prev)`` pairs walked by the sampler; the last lands on 0."""
    return list(zip(ladder, list(ladder[1:]) + [0]))
