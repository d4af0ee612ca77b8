"""Adversarial post-training on multi-block rollouts.

The generator rolls out ``B`` blocks with a KV cache and a freshly drawn
step count per block. Only the last denoising step of each block is
recorded on the tape; earlier steps and all context encodings run without
recording. A bidirectional discriminator that sees a longer window scores
noised (context + continuation) sequences, and the two networks are trained
with softplus relativistic losses plus a contrastive term that asks the
discriminator to tell matched from mismatched conditions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import SyntheticSpec, drift_metric
from .dit import DiT, AttentionMaskSpec, ConditionInput, MaskFamily, ModelConfig
from .errors import ConfigError, ContractError, DimensionError
from .flowcore import (NoiseRole, NoiseSchedule, SamplerConfig, draw_noise,
                       forward_corrupt, pingpong_step, x0_from_v)
from .stream import Engine, StreamSession, as_condition, generate_block
from .train import AdamW, TrainConfig, context_modes, pretrain

_ARC_ROLE = 4


@dataclass(frozen=True)
class RolloutConfig:
    blocks: int = 12
    k_max: int = 8
    k_min: int = 2
    p_uncond: float = 0.5
    p_partial: float = 0.1
    fixed_steps: int | None = None
    engine: str = "encdec"

    def __post_init__(self):
        if self.blocks < 1:
            raise ContractError(f"rollout needs at least one block, got {self.blocks}")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError(f"step range [{self.k_min}, {self.k_max}] is empty")
        if self.p_uncond < 0 or self.p_partial < 0 or self.p_uncond + self.p_partial > 1:
            raise ConfigError("p_uncond and p_partial must be >= 0 and sum to <= 1")
        if Engine(self.engine) is Engine.BASELINE:
            raise ConfigError("rollouts need a cached engine (encdec or blockcausal)")

    def draw_steps(self, rng) -> int:
        if self.fixed_steps is not None:
            return int(self.fixed_steps)
        return int(rng.integers(self.k_min, self.k_max + 1))


@dataclass(frozen=True)
class LossWeights:
    contrastive: float = 1.0

    def __post_init__(self):
        if self.contrastive < 0:
            raise ConfigError(f"contrastive weight must be >= 0, got {self.contrastive}")


# --------------------------------------------------------------------------
# rollout


@dataclass
class Rollout:
    frames: T.Tensor            # (N, C, B*o), differentiable through final steps
    context: np.ndarray         # (N, C, s) with null frames zeroed
    null_frames: np.ndarray
    steps: list


def rollout(generator: DiT, context, c, cfg: RolloutConfig, seed: int = 0, streams=None,
            rng=None, null_frames=None, tape: T.Tape | None = None) -> Rollout:
    """Generate ``cfg.blocks`` blocks with ping-pong sampling.

    ``null_frames`` fixes the per-item null-context count; otherwise it is
    drawn from ``cfg.p_uncond`` / ``cfg.p_partial`` with ``rng``. Noise
    draws use the same keys as :class:`StreamSession` with ``rng_seed=seed``.
    When ``tape`` is given, final steps are tagged with the ``"denoise"``
    region.
    """
    mcfg = generator.config
    s, o, C = mcfg.context_frames, mcfg.target_frames, mcfg.channels
    ctx = np.array(context, dtype=np.float32)
    if ctx.ndim != 3 or ctx.shape[1:] != (C, s):
        raise DimensionError(f"context must be (N, {C}, {s}), got {ctx.shape}")
    n = ctx.shape[0]
    rng = rng if rng is not None else np.random.default_rng(seed)
    if null_frames is None:
        null_frames = context_modes(rng, n, s, cfg.p_uncond, cfg.p_partial)
    null = np.asarray(null_frames, np.int64).copy()
    for i, cnt in enumerate(null):
        ctx[i, :, :cnt] = 0.0
    ctx0 = ctx.copy()
    null0 = null.copy()
    streams = np.arange(n) if streams is None else np.asarray(streams)
    base = as_condition(c, n)
    engine = Engine(cfg.engine)
    cache = generator.new_cache()
    blocks, steps_used = [], []

    def keyed(block, step, role):
        return draw_noise(seed, streams, block, step, role, C, o)

    if engine is Engine.BLOCKCAUSAL:
        pc = replace(base, null_context_frames=null.copy())
        with T.no_record():
            for b in range(s // o):
                generator.encode_context(ctx[:, :, b * o:(b + 1) * o], pc, cache)

    for b in range(cfg.blocks):
        K = cfg.draw_steps(rng)
        steps_used.append(K)
        cond = replace(base, null_context_frames=null.copy())
        if engine is Engine.ENCDEC:
            cache.clear()
            with T.no_record():
                generator.encode_context(ctx, cond, cache)
        pairs = NoiseSchedule.pingpong(K).pairs()
        x = keyed(b, 0, NoiseRole.TARGET_INIT)
        with T.no_record():
            for step, (k_j, k_prev) in zip(range(K, 1, -1), pairs[:-1]):
                v = generator.forward_decode(x, k_j, cond, cache).data
                x = pingpong_step(x0_from_v(x, k_j, v), k_prev,
                                  keyed(b, step, NoiseRole.RENOISE))
        k_last = pairs[-1][0]
        if tape is not None:
            with tape.region("denoise"):
                v = generator.forward_decode(x, k_last, cond, cache)
                x0 = x0_from_v(x, k_last, v)
        else:
            v = generator.forward_decode(x, k_last, cond, cache)
            x0 = x0_from_v(x, k_last, v)
        blocks.append(x0)
        new = x0.data
        if engine is Engine.BLOCKCAUSAL:
            with T.no_record():
                generator.encode_context(new, cond, cache, evict_oldest=True)
        if s:
            ctx = np.concatenate([ctx, new], axis=2)[:, :, -s:]
        null = np.maximum(null - o, 0)
    frames = blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=2)
    return Rollout(frames, ctx0, null0, steps_used)


# --------------------------------------------------------------------------
# losses


def softplus(x):
    """``log(1 + exp(x))`` on tensors or arrays."""
    if isinstance(x, T.Tensor):
        return T.softplus(x)
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def relativistic_from_scores(first, second) -> T.Tensor:
    """Batch mean of ``softplus(first - second)``."""
    a, b = T._as_tensor(first), T._as_tensor(second)
    if a.shape != b.shape:
        raise DimensionError(f"score shapes differ: {a.shape} vs {b.shape}")
    return T.mean(T.softplus(T.sub(a, b)))


def derangement(n: int, rng) -> np.ndarray:
    """Uniform random permutation with no fixed points (rejection sampling)."""
    if n < 2:
        raise ContractError(f"a derangement needs at least two items, got {n}")
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p


# --------------------------------------------------------------------------
# discriminator


def _window_starts(length: int, window: int) -> list:
    if length <= window:
        return [0]
    count = math.ceil(length / window)
    return sorted({int(round(x)) for x in np.linspace(0, length - window, count)})


@dataclass
class Discriminator:
    """Bidirectional backbone plus a pooled linear score head.

    Sequences longer than ``window`` are cut into evenly spaced windows
    that cover both ends; the score is the mean over windows. Shorter
    sequences are zero-padded at the front.
    """

    backbone: DiT
    head: dict = field(default_factory=dict)

    @property
    def window(self) -> int:
        return self.backbone.config.target_frames

    @staticmethod
    def backbone_config(gen_cfg: ModelConfig, window: int | None = None) -> ModelConfig:
        window = 2 * gen_cfg.total_frames if window is None else window
        return replace(gen_cfg, context_frames=0, target_frames=window,
                       max_positions=max(gen_cfg.max_positions, window))

    @classmethod
    def from_generator(cls, generator: DiT, window: int | None = None) -> "Discriminator":
        cfg = cls.backbone_config(generator.config, window)
        params = {n: T.parameter(p.data) for n, p in generator.params.items()}
        return cls(DiT(cfg, params))

    def attach_head(self, seed: int = 0):
        H = self.backbone.config.hidden
        rng = np.random.default_rng(seed)
        self.head = {"head.weight": T.parameter(rng.normal(0, 1 / math.sqrt(H), (H, 1))),
                     "head.bias": T.parameter(np.zeros(1))}
        return self

    @property
    def params(self) -> dict:
        out = dict(self.backbone.params)
        out.update(self.head)
        return out

    def frozen(self) -> "Discriminator":
        return Discriminator(self.backbone.frozen(),
                             {n: T.Tensor._wrap(p.data) for n, p in self.head.items()})

    def score(self, x_noisy, k, cond: ConditionInput | None = None) -> T.Tensor:
        """Scores ``(N,)`` for noised sequences ``(N, C, L)`` at levels ``k``."""
        if not self.head:
            raise ContractError("discriminator head is not attached yet")
        x = T._as_tensor(x_noisy)
        n, C, L = x.shape
        w = self.window
        if L < w:
            x = T.concat([np.zeros((n, C, w - L), np.float32), x], axis=2)
            L = w
        starts = _window_starts(L, w)
        pieces = [T.take(x, (slice(None), slice(None), slice(a, a + w))) for a in starts]
        xs = pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=0)
        reps = len(starts)
        cond = cond or ConditionInput()
        kk = np.tile(np.broadcast_to(np.asarray(k, np.float32), (n,)), reps)
        tc = ConditionInput(
            global_vec=None if cond.global_vec is None else np.tile(np.asarray(cond.global_vec), (reps, 1)),
            global_null=None if cond.global_null is None else np.tile(np.asarray(cond.global_null), reps))
        empty = np.zeros((n * reps, C, 0), np.float32)
        _, hidden = self.backbone.forward_full(
            xs, empty, kk, tc, mask_spec=AttentionMaskSpec(MaskFamily.BIDIRECTIONAL),
            return_hidden=True)
        pooled = T.mean(T.layer_norm(hidden[-1]), axis=1)
        s = T.add(T.matmul(pooled, self.head["head.weight"]), self.head["head.bias"])
        s = T.reshape(s, (reps, n))
        return T.mean(s, axis=0)


def relativistic_loss(D: Discriminator, fake, real, c, k) -> T.Tensor:
    """``mean softplus(D(fake) - D(real))``; fake and real share ``k``."""
    if tuple(T._as_tensor(fake).shape) != tuple(T._as_tensor(real).shape):
        raise DimensionError("fake and real batches differ in shape")
    return relativistic_from_scores(D.score(fake, k, c), D.score(real, k, c))


def contrastive_loss(D: Discriminator, real, c: ConditionInput, k, permutation) -> T.Tensor:
    """``mean softplus(D(real, P(c)) - D(real, c))`` for a derangement ``P``."""
    perm = np.asarray(permutation)
    n = T._as_tensor(real).shape[0]
    if n < 2:
        raise ContractError("contrastive loss needs a batch of at least two")
    if np.any(perm == np.arange(n)):
        raise ContractError("permutation has fixed points")
    return relativistic_from_scores(D.score(real, k, c.take(perm)), D.score(real, k, c))


# --------------------------------------------------------------------------
# training steps


@dataclass
class ArcBatch:
    context: np.ndarray          # (N, C, s), null frames zeroed
    real: np.ndarray             # (N, C, B*o) ground-truth continuation
    cond: ConditionInput         # global condition only
    null_frames: np.ndarray
    condition_ids: np.ndarray


def _noised(seq, k, eps):
    return forward_corrupt(seq, np.asarray(k, np.float32), eps)


def discriminator_step(D: Discriminator, opt: AdamW, fake: np.ndarray, real: np.ndarray,
                       cond: ConditionInput, rng, weights: LossWeights = LossWeights(),
                       k_range=(0.02, 0.98)) -> dict:
    """One update of ``D`` on ``L_R + lambda L_C``; the generator is not involved."""
    n = real.shape[0]
    k = rng.uniform(*k_range, n).astype(np.float32)
    fake_k = _noised(fake, k, rng.standard_normal(fake.shape).astype(np.float32))
    real_k = _noised(real, k, rng.standard_normal(real.shape).astype(np.float32))
    perm = derangement(n, rng) if weights.contrastive and n >= 2 else None
    with T.Tape() as tape:
        l_r = relativistic_loss(D, fake_k, real_k, cond, k)
        total = l_r
        l_c = None
        if perm is not None:
            l_c = contrastive_loss(D, real_k, cond, k, perm)
            total = T.add(l_r, T.scale(l_c, weights.contrastive))
    opt.step(tape.backward(total))
    return {"L_R_D": float(l_r.item()), "L_C": float(l_c.item()) if l_c is not None else 0.0}


def generator_loss(D_frozen: Discriminator, fake: T.Tensor, real: np.ndarray,
                   cond: ConditionInput, k, eps_fake, eps_real) -> T.Tensor:
    """``mean softplus(D(real) - D(fake))`` through the fake sequence."""
    fake_k = _noised(fake, k, eps_fake)
    real_k = _noised(real, k, eps_real)
    return relativistic_from_scores(D_frozen.score(real_k, k, cond),
                                    D_frozen.score(fake_k, k, cond))


def _with_context(context: np.ndarray, frames):
    return T.concat([context, frames], axis=2)


def generator_step(G: DiT, D: Discriminator, opt: AdamW, batch: ArcBatch, cfg: RolloutConfig,
                   seed: int, rng, k_range=(0.02, 0.98), d_opt: AdamW | None = None,
                   weights: LossWeights = LossWeights()) -> dict:
    """Roll out once, optionally update ``D`` on it, then update ``G``.

    The rollout is recorded once. When ``d_opt`` is given the discriminator
    trains on the detached rollout first and the generator then faces the
    updated (frozen) discriminator.
    """
    n = batch.context.shape[0]
    stats = {}
    with T.Tape() as tape:
        ro = rollout(G, batch.context, batch.cond, cfg, seed=seed, rng=rng,
                     null_frames=batch.null_frames, tape=tape)
        fake = _with_context(ro.context, ro.frames)
    real = np.concatenate([ro.context, batch.real], axis=2)
    if d_opt is not None:
        stats.update(discriminator_step(D, d_opt, fake.data, real, batch.cond, rng, weights, k_range))
    k = rng.uniform(*k_range, n).astype(np.float32)
    eps_f = rng.standard_normal(real.shape).astype(np.float32)
    eps_r = rng.standard_normal(real.shape).astype(np.float32)
    Df = D.frozen()
    with tape:
        loss = generator_loss(Df, fake, real, batch.cond, k, eps_f, eps_r)
    grads = tape.backward(loss)
    opt.step(grads)
    stats["L_G"] = float(loss.item())
    stats["steps"] = ro.steps
    return stats


# --------------------------------------------------------------------------
# data for post-training


def make_arc_batch(items, rng, gen_cfg: ModelConfig, cfg: RolloutConfig, n: int,
                   n_conditions: int) -> ArcBatch:
    s, o = gen_cfg.context_frames, gen_cfg.target_frames
    length = s + cfg.blocks * o
    idx = rng.integers(len(items), size=n)
    ctx, real, ids = [], [], []
    for i in idx:
        x = items[i].latents
        if x.shape[1] < length:
            raise ConfigError(f"items have {x.shape[1]} frames; rollouts need {length}")
        off = int(rng.integers(x.shape[1] - length + 1))
        ctx.append(x[:, off:off + s])
        real.append(x[:, off + s:off + length])
        ids.append(items[i].condition_id)
    ids = np.array(ids)
    nulls = context_modes(rng, n, s, cfg.p_uncond, cfg.p_partial)
    ctx = np.stack(ctx).astype(np.float32)
    for i, cnt in enumerate(nulls):
        ctx[i, :, :cnt] = 0.0
    g = np.eye(n_conditions, gen_cfg.cond_dim, dtype=np.float32)[ids]
    return ArcBatch(ctx, np.stack(real).astype(np.float32), ConditionInput(global_vec=g),
                    nulls, ids)


# --------------------------------------------------------------------------
# full procedure


@dataclass(frozen=True)
class ArcConfig:
    steps: int = 300
    batch: int = 8
    lr_g: float = 1e-5
    lr_d: float = 2e-4
    weight_decay: float = 0.0
    warmstart_steps: int = 300
    warmstart_lr: float = 5e-4
    warmstart_batch: int = 16
    d_window: int | None = None
    k_range: tuple = (0.02, 0.98)
    seed: int = 0
    probe_every: int = 50
    probe_items: int = 8

    def __post_init__(self):
        if self.steps < 0 or self.warmstart_steps < 0 or self.batch < 2:
            raise ConfigError("steps must be >= 0 and batch >= 2")
        lo, hi = self.k_range
        if not 0 <= lo < hi <= 1:
            raise ConfigError(f"bad k_range {self.k_range}")


def warmstart_discriminator(D: Discriminator, items, steps: int, n_conditions: int,
                            lr: float = 5e-4, batch: int = 16, seed: int = 0, log=None):
    """Flow-matching training of the backbone on ``window``-long crops.

    The score head is not touched (attach it afterwards). Returns the loss
    curve.
    """
    if D.head:
        raise ContractError("warm-start runs before the score head is attached")
    if steps == 0:
        return []
    tc = TrainConfig(steps=steps, batch=batch, lr=lr, warmup=min(20, steps), p_uncond=0.0,
                     p_partial=0.0, p_drop_cond=0.1, mask="bidirectional", seed=seed,
                     log_every=max(steps // 5, 1))
    res = pretrain(D.backbone, items, tc, n_conditions,
                   log=(lambda r: log({**r, "event": "warmstart_step"})) if log else None)
    return res.losses


def drift_probe(G: DiT, sampler: SamplerConfig, spec: SyntheticSpec, items, blocks: int,
                seeds, n_items: int, engine: str = "encdec") -> np.ndarray:
    """Per-block drift of primed, conditioned rollouts; shape ``(len(seeds), blocks)``.

    Each seed picks ``n_items`` corpus items, primes with their first ``s``
    frames and conditions on their class.
    """
    cfg = G.config
    s = cfg.context_frames
    out = []
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(7,)))
        idx = rng.choice(len(items), size=n_items, replace=False)
        prime = np.stack([items[i].latents[:, :s] for i in idx])
        ids = np.array([items[i].condition_id for i in idx])
        g = np.eye(spec.n_conditions, cfg.cond_dim, dtype=np.float32)[ids]
        sess = StreamSession.create(G, engine, replace(sampler, rng_seed=int(seed)), n_items,
                                    prime=prime)
        x = np.concatenate([generate_block(sess, g) for _ in range(blocks)], axis=2)
        d = drift_metric(x, spec, ids, cfg.target_frames)
        out.append(d.mean(axis=0))
    return np.array(out)


@dataclass
class ArcResult:
    generator: DiT
    discriminator: Discriminator
    warmstart_losses: list
    history: list


def arc_force(G: DiT, items, spec: SyntheticSpec, cfg: ArcConfig = ArcConfig(),
              rollout_cfg: RolloutConfig = RolloutConfig(), weights: LossWeights = LossWeights(),
              log=None, csv_path=None, probe=None) -> ArcResult:
    """Warm-start the discriminator, then alternate D and G updates.

    ``probe(G) -> float`` is evaluated every ``cfg.probe_every`` steps and
    written to the ``drift`` column.
    """
    G = G.trainable()
    D = Discriminator.from_generator(G, cfg.d_window)
    if log:
        log({"event": "warmstart_begin", "steps": cfg.warmstart_steps})
    ws = warmstart_discriminator(D, items, cfg.warmstart_steps, spec.n_conditions,
                                 cfg.warmstart_lr, cfg.warmstart_batch, cfg.seed, log)
    D.attach_head(cfg.seed)
    if log:
        log({"event": "adversarial_begin", "steps": cfg.steps})
    g_opt = AdamW(G.params, lr=cfg.lr_g, weight_decay=cfg.weight_decay)
    d_opt = AdamW(D.params, lr=cfg.lr_d, weight_decay=cfg.weight_decay)
    history = []
    fh = writer = None
    if csv_path is not None:
        fh = open(csv_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "L_R_D", "L_C", "L_G", "drift"])
    try:
        for step in range(cfg.steps):
            rng = np.random.default_rng(np.random.SeedSequence(
                entropy=int(cfg.seed), spawn_key=(int(step), _ARC_ROLE)))
            batch = make_arc_batch(items, rng, G.config, rollout_cfg, cfg.batch, spec.n_conditions)
            stats = generator_step(G, D, g_opt, batch, rollout_cfg,
                                   seed=(int(cfg.seed) << 24) + step, rng=rng,
                                   k_range=cfg.k_range, d_opt=d_opt, weights=weights)
            for p in list(G.params.values()) + list(D.params.values()):
                if not np.all(np.isfinite(p.data)):
                    raise FloatingPointError(f"non-finite parameters at step {step}")
            drift = ""
            if probe is not None and (step % cfg.probe_every == 0 or step == cfg.steps - 1):
                drift = float(probe(G))
            row = {"step": step, "L_R_D": stats["L_R_D"], "L_C": stats["L_C"],
                   "L_G": stats["L_G"], "drift": drift}
            history.append(row)
            if writer is not None:
                writer.writerow([row[k] for k in ("step", "L_R_D", "L_C", "L_G", "drift")])
            if log and (step % max(cfg.probe_every, 1) == 0 or step == cfg.steps - 1):
                log({"event": "arc_step", **row})
    finally:
        if fh is not None:
            fh.close()
    return ArcResult(G, D, ws, history)
