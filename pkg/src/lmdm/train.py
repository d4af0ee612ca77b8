"""Optimizer and the flow-matching training loop.

Training windows are ``s + o`` frames cut from corpus items. Each item's
context is kept, fully nulled (``p_uncond``) or nulled on its first ``n``
frames (``p_partial``), and its global condition is dropped with
``p_drop_cond`` so the same network also serves as the unconditional branch
for guidance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import SyntheticSpec
from .dit import DiT, AttentionMaskSpec, ConditionInput, MaskFamily
from .errors import ConfigError
from .flowcore import NoiseRole, flow_loss


@dataclass
class AdamW:
    """Adaptive moments with decoupled weight decay.

    ``params`` maps names to grad-enabled tensors; :meth:`step` replaces
    each tensor's data in place so models holding the tensors see the update.
    """

    params: dict
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def step(self, grads) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        g = {n: grads.get(p) for n, p in self.params.items()}
        sq = sum(float(np.sum(a.astype(np.float64) ** 2)) for a in g.values() if a is not None)
        norm = math.sqrt(sq)
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / norm
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params.items():
            gi = g[name]
            if gi is None:
                gi = np.zeros_like(p.data)
            gi = gi * factor
            self.m[name] = b1 * self.m[name] + (1 - b1) * gi
            self.v[name] = b2 * self.v[name] + (1 - b2) * gi * gi
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            new = p.data * (1 - self.lr * self.weight_decay) - self.lr * update
            new = new.astype(p.data.dtype)
            new.flags.writeable = False
            p.data = new
        return norm

    def state(self, prefix: str = "opt") -> dict:
        out = {f"{prefix}/t": np.array([self.t], np.float32)}
        for name in self.params:
            out[f"{prefix}/m/{name}"] = self.m[name]
            out[f"{prefix}/v/{name}"] = self.v[name]
        return out

    def load_state(self, state: dict, prefix: str = "opt"):
        self.t = int(state[f"{prefix}/t"][0])
        for name in self.params:
            self.m[name] = np.array(state[f"{prefix}/m/{name}"], dtype=np.float32)
            self.v[name] = np.array(state[f"{prefix}/v/{name}"], dtype=np.float32)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.0
    warmup: int = 50
    p_uncond: float = 0.5
    p_partial: float = 0.2
    p_drop_cond: float = 0.1
    mask: str = "encdec"
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be positive")
        if not (0 <= self.p_uncond and 0 <= self.p_partial and self.p_uncond + self.p_partial <= 1):
            raise ConfigError("context dropout probabilities must be >= 0 and sum to <= 1")
        if not 0 <= self.p_drop_cond <= 1:
            raise ConfigError("p_drop_cond must lie in [0, 1]")
        MaskFamily(self.mask)


def lr_at(step: int, base: float, warmup: int, total: int) -> float:
    """Linear warmup then cosine decay to 10% of ``base``."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    frac = (step - warmup) / max(total - warmup, 1)
    return base * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0))))


def context_modes(rng, n: int, s: int, p_uncond: float, p_partial: float) -> np.ndarray:
    """Null-frame count per item: ``s`` (null), ``U{1..s-1}`` (partial) or 0 (full)."""
    u = rng.random(n)
    counts = np.zeros(n, np.int64)
    counts[u < p_uncond] = s
    partial = (u >= p_uncond) & (u < p_uncond + p_partial)
    if s > 1:
        counts[partial] = rng.integers(1, s, partial.sum())
    else:
        counts[partial] = s
    return counts


@dataclass
class Batch:
    window: np.ndarray          # (N, C, s + o)
    context: np.ndarray         # (N, C, s), null frames zeroed
    cond: ConditionInput
    condition_ids: np.ndarray


def sample_windows(items, rng, n: int, frames: int, spec: SyntheticSpec | None = None,
                   local_channels: int = 0):
    """Random ``frames``-long crops; returns ``(windows, ids, local)``."""
    idx = rng.integers(len(items), size=n)
    wins, ids, local = [], [], []
    for i in idx:
        it = items[i]
        T_total = it.latents.shape[1]
        if T_total < frames:
            raise ConfigError(f"corpus items have {T_total} frames, need {frames}")
        off = int(rng.integers(T_total - frames + 1))
        wins.append(it.latents[:, off:off + frames])
        ids.append(it.condition_id)
        if local_channels:
            local.append(it.local_chans[:local_channels, off:off + frames])
    return (np.stack(wins).astype(np.float32), np.array(ids),
            np.stack(local) if local_channels else None)


def make_batch(items, rng, model_cfg, n_conditions: int, n: int, p_uncond: float,
               p_partial: float, p_drop_cond: float) -> Batch:
    s = model_cfg.context_frames
    win, ids, local = sample_windows(items, rng, n, model_cfg.total_frames,
                                     local_channels=model_cfg.local_cond_channels)
    nulls = context_modes(rng, n, s, p_uncond, p_partial)
    ctx = win[:, :, :s].copy()
    for i, c in enumerate(nulls):
        ctx[i, :, :c] = 0.0
    g = np.eye(n_conditions, model_cfg.cond_dim, dtype=np.float32)[ids]
    gnull = rng.random(n) < p_drop_cond
    cond = ConditionInput(global_vec=g, global_null=gnull, local_chans=local,
                          local_null=gnull if local is not None else None,
                          null_context_frames=nulls)
    return Batch(win, ctx, cond, ids)


def batch_loss(model: DiT, batch: Batch, k: np.ndarray, eps: np.ndarray,
               mask: MaskFamily = MaskFamily.ENCDEC) -> T.Tensor:
    """Flow-matching loss on the target frames of a batch."""
    cfg = model.config
    s, o = cfg.context_frames, cfg.target_frames
    target_mask = np.zeros(cfg.total_frames, bool)
    target_mask[s:] = True
    spec = AttentionMaskSpec(mask, s, o)

    def velocity(x_k, k):
        return model.forward_full(x_k, batch.context, k, batch.cond, mask_spec=spec)

    full_eps = np.concatenate([np.zeros_like(batch.context), eps], axis=2)
    return flow_loss(velocity, batch.window, k, full_eps, target_mask)


def train_step(model: DiT, opt: AdamW, batch: Batch, rng, mask=MaskFamily.ENCDEC) -> float:
    n = batch.window.shape[0]
    cfg = model.config
    k = rng.random(n).astype(np.float32)
    eps = rng.standard_normal((n, cfg.channels, cfg.target_frames)).astype(np.float32)
    with T.Tape() as tape:
        loss = batch_loss(model, batch, k, eps, MaskFamily(mask))
    grads = tape.backward(loss)
    opt.step(grads)
    return float(loss.item())


def step_rng(seed: int, step: int):
    """Per-step generator so resumed runs draw the same batches."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed),
                                                        spawn_key=(int(step), NoiseRole.TRAIN)))


@dataclass
class TrainResult:
    model: DiT
    losses: list
    optimizer: AdamW
    step: int


def pretrain(model: DiT, items, cfg: TrainConfig, n_conditions: int,
             optimizer: AdamW | None = None, start_step: int = 0, stop_step: int | None = None,
             log=None, csv_path=None) -> TrainResult:
    """Flow-matching training; deterministic given ``cfg.seed`` and ``start_step``."""
    opt = optimizer or AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses = []
    stop = cfg.steps if stop_step is None else min(stop_step, cfg.steps)
    writer = None
    fh = None
    if csv_path is not None:
        fh = open(csv_path, "a" if start_step else "w", newline="")
        writer = csv.writer(fh)
        if not start_step:
            writer.writerow(["step", "loss", "lr"])
    try:
        for step in range(start_step, stop):
            rng = step_rng(cfg.seed, step)
            opt.lr = lr_at(step, cfg.lr, cfg.warmup, cfg.steps)
            batch = make_batch(items, rng, model.config, n_conditions, cfg.batch,
                               cfg.p_uncond, cfg.p_partial, cfg.p_drop_cond)
            loss = train_step(model, opt, batch, rng, cfg.mask)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            losses.append(loss)
            if writer is not None:
                writer.writerow([step, f"{loss:.8g}", f"{opt.lr:.8g}"])
            if log is not None and (step % cfg.log_every == 0 or step == stop - 1):
                log({"event": "train_step", "step": step, "loss": loss, "lr": opt.lr})
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(model, losses, opt, stop)


def smoothed(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(v)))
    return np.convolve(v, np.ones(window) / window, mode="valid")
