"""Flow-matching primitives: corruption, loss, guidance and sampler steps.

Conventions: noise level ``k`` runs from 0 (clean) to 1 (pure noise) and the
velocity field is ``dx/dk = eps - x``. Latent sequences are arrays shaped
``(..., C, T)``. Step functions accept numpy arrays or tensors; with tensors
they stay on the gradient tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError


def _levels(k, ndim: int):
    """Broadcast a scalar or per-item level array against ``(N, C, T)`` data."""
    k = np.asarray(k, dtype=np.float32)
    if k.ndim == 0:
        return float(k)
    return k.reshape(k.shape + (1,) * (ndim - k.ndim))


def _shape(x):
    return x.shape


def forward_corrupt(x, k, eps):
    """``(1 - k) x + k eps``."""
    if _shape(x) != _shape(eps):
        raise DimensionError(f"x {_shape(x)} and eps {_shape(eps)} differ")
    karr = np.asarray(k)
    if np.any(karr < 0) or np.any(karr > 1):
        raise ContractError(f"noise level must lie in [0, 1], got {k}")
    kb = _levels(k, len(_shape(x)))
    if isinstance(x, T.Tensor) or isinstance(eps, T.Tensor):
        kt = kb if np.isscalar(kb) else np.broadcast_to(kb, _shape(x))
        return T.add(T.mul(x, 1.0 - kt), T.mul(eps, kt))
    x = np.asarray(x, np.float32)
    return ((1.0 - kb) * x + kb * np.asarray(eps, np.float32)).astype(np.float32)


def marginal_velocity(x, eps):
    """Target velocity ``eps - x`` of the straight corruption path."""
    if _shape(x) != _shape(eps):
        raise DimensionError(f"x {_shape(x)} and eps {_shape(eps)} differ")
    if isinstance(x, T.Tensor) or isinstance(eps, T.Tensor):
        return T.sub(eps, x)
    return np.asarray(eps, np.float32) - np.asarray(x, np.float32)


def masked_mse(v_pred: T.Tensor, v_target, frame_mask) -> T.Tensor:
    """Mean squared error over the frames where ``frame_mask`` is true.

    ``frame_mask`` indexes the last (time) axis.
    """
    frame_mask = np.asarray(frame_mask, dtype=bool)
    if frame_mask.ndim != 1 or frame_mask.shape[0] != v_pred.shape[-1]:
        raise DimensionError(f"mask of length {frame_mask.shape} for {v_pred.shape[-1]} frames")
    n = int(frame_mask.sum())
    if n == 0:
        raise ContractError("target mask selects no frames")
    diff = T.sub(v_pred, v_target)
    sq = T.square(diff)
    weights = np.broadcast_to(frame_mask.astype(np.float32), v_pred.shape)
    total = T.sum(T.mul(sq, weights))
    return T.scale(total, 1.0 / (v_pred.size // v_pred.shape[-1] * n))


def flow_loss(velocity: Callable, x, k, eps, target_mask) -> T.Tensor:
    """Masked flow-matching regression loss.

    ``velocity(x_k, k)`` returns the model's prediction over all frames;
    the loss only looks at frames selected by ``target_mask``.
    """
    x_k = forward_corrupt(x, k, eps)
    v_hat = velocity(x_k, k)
    return masked_mse(v_hat, marginal_velocity(x, eps), target_mask)


def cfg_combine(v_cond, v_uncond, w: float):
    """Classifier-free guidance ``v_uncond + w (v_cond - v_uncond)``."""
    if w < 1:
        raise ContractError(f"guidance weight must be >= 1, got {w}")
    if w == 1:
        return v_cond
    if isinstance(v_cond, T.Tensor) or isinstance(v_uncond, T.Tensor):
        return T.add(v_uncond, T.scale(T.sub(v_cond, v_uncond), w))
    return v_uncond + w * (v_cond - v_uncond)


def euler_step(v_hat, x_k, k_j: float, k_prev: float):
    """Integrate ``dx/dk = v`` from ``k_j`` down to ``k_prev``."""
    if not k_prev < k_j:
        raise ContractError(f"levels must decrease: {k_j} -> {k_prev}")
    dk = float(k_prev) - float(k_j)
    if isinstance(v_hat, T.Tensor) or isinstance(x_k, T.Tensor):
        return T.add(x_k, T.scale(v_hat, dk))
    return x_k + dk * v_hat


def x0_from_v(x_k, k, v_hat):
    """Clean estimate ``x_k - k v``."""
    if np.any(np.asarray(k) < 0) or np.any(np.asarray(k) > 1):
        raise ContractError(f"noise level must lie in [0, 1], got {k}")
    kb = _levels(k, len(_shape(x_k)))
    if isinstance(v_hat, T.Tensor) or isinstance(x_k, T.Tensor):
        kt = kb if np.isscalar(kb) else np.broadcast_to(kb, _shape(x_k))
        return T.sub(x_k, T.mul(v_hat, kt))
    return x_k - kb * v_hat


def pingpong_step(x0_hat, k_prev: float, eps_new):
    """Renoise a clean estimate to ``k_prev``.

    Written as ``x0 + k_prev (eps - x0)``, algebraically
    ``(1 - k_prev) x0 + k_prev eps``.
    """
    if not 0 <= k_prev < 1:
        raise ContractError(f"k_prev must lie in [0, 1), got {k_prev}")
    if isinstance(x0_hat, T.Tensor):
        return T.add(x0_hat, T.scale(T.sub(eps_new, x0_hat), k_prev))
    return x0_hat + k_prev * (eps_new - x0_hat)


def p4_guided_x0(x0_cond, x0_uncond, weight: float):
    """Interpolate clean estimates: ``x0_u + weight (x0_c - x0_u)``."""
    if isinstance(x0_cond, T.Tensor) or isinstance(x0_uncond, T.Tensor):
        return T.add(x0_uncond, T.scale(T.sub(x0_cond, x0_uncond), weight))
    return x0_uncond + weight * (x0_cond - x0_uncond)


def p4_step(x0_guided, x0_uncond, k_prev: float, eps_new):
    """Denoise with the guided estimate, renoise with the unconditional one."""
    if not 0 <= k_prev < 1:
        raise ContractError(f"k_prev must lie in [0, 1), got {k_prev}")
    if isinstance(x0_guided, T.Tensor) or isinstance(x0_uncond, T.Tensor):
        return T.add(x0_guided, T.scale(T.sub(eps_new, x0_uncond), k_prev))
    return x0_guided + k_prev * (eps_new - x0_uncond)


# --------------------------------------------------------------------------
# schedules and sampler configuration


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly decreasing levels ``k_K > ... > k_1``; ``k_0 = 0`` is implied."""

    levels: tuple

    def __post_init__(self):
        lv = tuple(float(k) for k in self.levels)
        if not lv:
            raise ConfigError("schedule needs at least one level")
        full = lv + (0.0,)
        if any(not 0 <= k <= 1 for k in lv):
            raise ConfigError(f"levels must lie in [0, 1]: {lv}")
        if any(a <= b for a, b in zip(full, full[1:])):
            raise ConfigError(f"levels must be strictly decreasing to 0: {lv}")
        object.__setattr__(self, "levels", lv)

    @property
    def steps(self) -> int:
        return len(self.levels)

    def pairs(self):
        """``(k_j, k_{j-1})`` for ``j = K .. 1``."""
        full = self.levels + (0.0,)
        return list(zip(full[:-1], full[1:]))

    @classmethod
    def uniform(cls, steps: int) -> "NoiseSchedule":
        if steps < 1:
            raise ConfigError(f"steps must be positive, got {steps}")
        return cls(tuple(j / steps for j in range(steps, 0, -1)))

    @classmethod
    def pingpong(cls, steps: int) -> "NoiseSchedule":
        # {1, .75, .5, .25} truncated to K; longer runs fall back to uniform
        if steps < 1:
            raise ConfigError(f"steps must be positive, got {steps}")
        if steps <= 4:
            return cls((1.0, 0.75, 0.5, 0.25)[:steps])
        return cls.uniform(steps)


class SamplerKind(str, Enum):
    EULER = "euler"
    PINGPONG = "pingpong"
    P4 = "p4"


@dataclass(frozen=True)
class SamplerConfig:
    kind: SamplerKind = SamplerKind.EULER
    steps: int = 8
    cfg_weight: float = 1.0
    p4_weight: float = 0.7
    rng_seed: int = 0
    levels: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SamplerKind(self.kind))
        if self.steps < 1:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if self.cfg_weight < 1:
            raise ConfigError(f"cfg_weight must be >= 1, got {self.cfg_weight}")
        if not 0 <= self.p4_weight <= 1:
            raise ConfigError(f"p4_weight must lie in [0, 1], got {self.p4_weight}")
        if self.levels is not None and len(self.levels) != self.steps:
            raise ConfigError("explicit levels must have one entry per step")

    @property
    def schedule(self) -> NoiseSchedule:
        if self.levels is not None:
            return NoiseSchedule(tuple(self.levels))
        if self.kind is SamplerKind.EULER:
            return NoiseSchedule.uniform(self.steps)
        return NoiseSchedule.pingpong(self.steps)

    @property
    def guided(self) -> bool:
        """Whether each step needs an unconditional prediction too."""
        return self.kind is SamplerKind.P4 or self.cfg_weight != 1.0


# --------------------------------------------------------------------------
# counter-keyed noise


class NoiseRole(int, Enum):
    TARGET_INIT = 0
    RENOISE = 1
    CONTEXT = 2
    TRAIN = 3


@dataclass(frozen=True)
class NoiseKey:
    seed: int
    stream: int
    block: int
    step: int
    role: NoiseRole

    def draw(self, channels: int, frames: int) -> np.ndarray:
        """Standard normal ``(channels, frames)``, filled frame by frame."""
        ss = np.random.SeedSequence(entropy=int(self.seed),
                                    spawn_key=(int(self.stream), int(self.block),
                                               int(self.step), int(self.role)))
        rng = np.random.Generator(np.random.Philox(ss))
        return rng.standard_normal((frames, channels), dtype=np.float32).T.copy()


def draw_noise(seed: int, streams, block: int, step: int, role: NoiseRole,
               channels: int, frames: int) -> np.ndarray:
    """Batch of keyed draws, one per stream id: ``(N, channels, frames)``."""
    return np.stack([NoiseKey(seed, s, block, step, role).draw(channels, frames)
                     for s in np.atleast_1d(streams)])


# --------------------------------------------------------------------------
# generic per-block sampler


@dataclass
class StepStats:
    """Counts model calls made by :func:`sample_block`."""

    calls: int = 0
    per_step: list = field(default_factory=list)


def sample_block(predict: Callable, x_init: np.ndarray, sampler: SamplerConfig,
                 noise: Callable[[int], np.ndarray], stats: StepStats | None = None,
                 schedule: NoiseSchedule | None = None):
    """Run one block of sampling over target frames.

    ``predict(x_k, k, step)`` returns ``(v_cond, v_uncond)``; ``v_uncond``
    may be ``None`` when the sampler is unguided. ``noise(step)`` supplies
    fresh renoising draws for ping-pong style samplers.
    """
    schedule = schedule or sampler.schedule
    x = x_init
    for step, (k_j, k_prev) in zip(range(schedule.steps, 0, -1), schedule.pairs()):
        v_c, v_u = predict(x, k_j, step)
        if stats is not None:
            stats.calls += 1
        if sampler.kind is SamplerKind.EULER:
            v = v_c if v_u is None else cfg_combine(v_c, v_u, sampler.cfg_weight)
            x = euler_step(v, x, k_j, k_prev)
        elif sampler.kind is SamplerKind.PINGPONG:
            v = v_c if v_u is None else cfg_combine(v_c, v_u, sampler.cfg_weight)
            x0 = x0_from_v(x, k_j, v)
            x = x0 if k_prev == 0 else pingpong_step(x0, k_prev, noise(step))
        else:
            x0_c = x0_from_v(x, k_j, v_c)
            x0_u = x0_c if v_u is None else x0_from_v(x, k_j, v_u)
            x0_g = p4_guided_x0(x0_c, x0_u, sampler.p4_weight)
            x = x0_g if k_prev == 0 else p4_step(x0_g, x0_u, k_prev, noise(step))
    return x
