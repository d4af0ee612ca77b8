"""Streaming inference engines, prompt transitions and pass counting.

Three engines generate ``o`` frames per block from a sliding window of ``s``
clean context frames:

* ``BASELINE`` runs ``K`` full-window forwards per block, re-noising the
  context to the current level every step. It can use the bidirectional mask
  (plain outpainting) or the encoder-decoder mask (the cache-free twin of
  ``ENCDEC``).
* ``ENCDEC`` encodes the context once per block into a KV cache and then runs
  ``K`` decode passes over the target block only.
* ``BLOCKCAUSAL`` fills the cache once at the start and afterwards only
  encodes each newly generated block, evicting the oldest one.

All randomness comes from counter-keyed draws (see :class:`NoiseKey`), so
engines that compute the same function produce the same samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator

import numpy as np

from . import tensor as T
from .dit import (DiT, AttentionMaskSpec, ConditionInput, KVCache, MaskFamily,
                  stack_conditions)
from .errors import ConfigError, ContractError, DimensionError
from .flowcore import (NoiseRole, SamplerConfig, SamplerKind, StepStats, draw_noise,
                       forward_corrupt, sample_block)


class Engine(str, Enum):
    BASELINE = "baseline"
    ENCDEC = "encdec"
    BLOCKCAUSAL = "blockcausal"


@dataclass
class NFECounters:
    full_passes: int = 0
    encode_passes: int = 0
    decode_passes: int = 0

    def as_dict(self) -> dict:
        return {"full_passes": self.full_passes, "encode_passes": self.encode_passes,
                "decode_passes": self.decode_passes}


@dataclass
class StreamEvent:
    kind: str
    block: int
    detail: dict = field(default_factory=dict)


@dataclass
class StreamSession:
    """State of one streaming generation (batch of ``N`` parallel streams).

    ``context`` always holds the most recent ``s`` frames;
    ``null_frames`` counts, per stream, how many of its oldest frames are
    still null (an unprimed start is entirely null).
    """

    engine: Engine
    model: DiT
    sampler: SamplerConfig
    context: np.ndarray
    null_frames: np.ndarray
    streams: np.ndarray
    baseline_mask: MaskFamily = MaskFamily.BIDIRECTIONAL
    cache: KVCache | None = None
    block: int = 0
    counters: NFECounters = field(default_factory=NFECounters)
    steps_run: list = field(default_factory=list)
    events: list = field(default_factory=list)
    prefilled: bool = False
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, model: DiT, engine, sampler: SamplerConfig | None = None,
               batch: int = 1, prime=None, streams=None,
               baseline_mask=MaskFamily.BIDIRECTIONAL) -> "StreamSession":
        """New session; ``prime`` is ``(C, T)`` or ``(N, C, T)``, last ``s`` frames used.

        Without a prime the context is null. A prime shorter than ``s`` is
        left-padded with null frames.
        """
        engine = Engine(engine)
        cfg = model.config
        s, C = cfg.context_frames, cfg.channels
        sampler = sampler or SamplerConfig()
        if engine is Engine.BLOCKCAUSAL and (s % cfg.target_frames):
            raise ConfigError("block-causal streaming needs s divisible by o")
        ctx = np.zeros((batch, C, s), np.float32)
        null = np.full(batch, s, np.int64)
        if prime is not None:
            p = np.asarray(prime, np.float32)
            if p.ndim == 2:
                p = np.broadcast_to(p, (batch,) + p.shape)
            if p.shape[0] != batch:
                raise DimensionError(f"prime batch {p.shape[0]} != session batch {batch}")
            if p.shape[1] != C:
                raise ConfigError(f"prime has {p.shape[1]} channels, model expects {C}")
            take = min(s, p.shape[2])
            if take:
                ctx[:, :, s - take:] = p[:, :, p.shape[2] - take:]
            null[:] = s - take
        streams = np.arange(batch) if streams is None else np.asarray(streams)
        if len(streams) != batch:
            raise DimensionError("one stream id per batch item is required")
        session = cls(engine, model, sampler, ctx, null, streams, MaskFamily(baseline_mask))
        if engine is not Engine.BASELINE:
            session.cache = model.new_cache()
        session.history = [ctx.copy()]
        return session

    @property
    def batch(self) -> int:
        return self.context.shape[0]

    @property
    def seed(self) -> int:
        return self.sampler.rng_seed

    def context_dropout(self, frames: int):
        """Null the oldest ``frames`` context frames of every stream."""
        d = int(min(max(frames, 0), self.context.shape[2]))
        self.context[:, :, :d] = 0.0
        self.null_frames = np.maximum(self.null_frames, d)
        self.events.append(StreamEvent("context_dropout", self.block, {"frames": d}))


# --------------------------------------------------------------------------
# helpers


def as_condition(c, batch: int) -> ConditionInput:
    """Accept ``None``, a global vector ``(cond_dim,)``/``(N, cond_dim)`` or a ConditionInput."""
    if c is None:
        return ConditionInput()
    if isinstance(c, ConditionInput):
        return c
    g = np.asarray(c, np.float32)
    if g.ndim == 1:
        g = np.broadcast_to(g, (batch, g.shape[0])).copy()
    return ConditionInput(global_vec=g)


def _window_cond(session: StreamSession, cond: ConditionInput) -> ConditionInput:
    """Condition for the current window: null flags and local-channel slice.

    Local channels supplied to a session span the whole timeline
    (``s + B*o`` frames, prime window first) and are sliced per block.
    """
    cfg = session.model.config
    out = replace(cond, null_context_frames=session.null_frames.copy())
    if cond.local_chans is not None:
        start = session.block * cfg.target_frames
        lc = np.asarray(cond.local_chans, np.float32)
        if lc.shape[2] < start + cfg.total_frames:
            raise DimensionError(f"local channels cover {lc.shape[2]} frames; block "
                                 f"{session.block} needs {start + cfg.total_frames}")
        out = replace(out, local_chans=lc[:, :, start:start + cfg.total_frames])
    return out


def _pair(session: StreamSession, cond: ConditionInput):
    """Batched condition for one pass; guided samplers stack cond and uncond."""
    n = session.batch
    if session.sampler.guided:
        return stack_conditions(cond, cond.unconditional(), n), True
    return cond, False


def _split(v: np.ndarray, guided: bool, n: int):
    if guided:
        return v[:n], v[n:]
    return v, None


def _noise(session: StreamSession, step: int, role: NoiseRole, frames: int) -> np.ndarray:
    return draw_noise(session.seed, session.streams, session.block, step, role,
                      session.model.config.channels, frames)


def _dup(x: np.ndarray, guided: bool) -> np.ndarray:
    return np.concatenate([x, x]) if guided else x


# --------------------------------------------------------------------------
# engines


def _block_baseline(session: StreamSession, cond: ConditionInput, stats: StepStats):
    model, cfg = session.model, session.model.config
    n, s, o = session.batch, cfg.context_frames, cfg.target_frames
    wcond = _window_cond(session, cond)
    pcond, guided = _pair(session, wcond)
    route = session.baseline_mask is not MaskFamily.BIDIRECTIONAL
    spec = AttentionMaskSpec(session.baseline_mask, s, o)
    ctx = session.context

    def predict(x, k, step):
        ctx_k = forward_corrupt(ctx, k, _noise(session, step, NoiseRole.CONTEXT, s))
        window = np.concatenate([ctx_k, x], axis=2)
        with T.no_record():
            v = model.forward_full(_dup(window, guided), _dup(ctx, guided), k, pcond,
                                   mask_spec=spec, route=route).data
        session.counters.full_passes += 1
        return _split(v[:, :, s:], guided, n)

    return predict


def _block_encdec(session: StreamSession, cond: ConditionInput, stats: StepStats):
    model = session.model
    n = session.batch
    wcond = _window_cond(session, cond)
    pcond, guided = _pair(session, wcond)
    session.cache.clear()
    with T.no_record():
        model.encode_context(_dup(session.context, guided), pcond, session.cache)
    session.counters.encode_passes += 1

    def predict(x, k, step):
        with T.no_record():
            v = model.forward_decode(_dup(x, guided), k, pcond, session.cache).data
        session.counters.decode_passes += 1
        return _split(v, guided, n)

    return predict


def _prefill(session: StreamSession, cond: ConditionInput):
    model, cfg = session.model, session.model.config
    o, s = cfg.target_frames, cfg.context_frames
    pcond, guided = _pair(session, _window_cond(session, cond))
    session.cache.clear()
    for b in range(s // o):
        with T.no_record():
            model.encode_context(_dup(session.context[:, :, b * o:(b + 1) * o], guided),
                                 pcond, session.cache)
        session.counters.encode_passes += 1
    session.prefilled = True


def _block_blockcausal(session: StreamSession, cond: ConditionInput, stats: StepStats):
    model = session.model
    n = session.batch
    if not session.prefilled:
        _prefill(session, cond)
    pcond, guided = _pair(session, _window_cond(session, cond))

    def predict(x, k, step):
        with T.no_record():
            v = model.forward_decode(_dup(x, guided), k, pcond, session.cache).data
        session.counters.decode_passes += 1
        return _split(v, guided, n)

    return predict


def _after_blockcausal(session: StreamSession, cond: ConditionInput, x0: np.ndarray):
    pcond, guided = _pair(session, _window_cond(session, cond))
    with T.no_record():
        session.model.encode_context(_dup(x0, guided), pcond, session.cache, evict_oldest=True)
    session.counters.encode_passes += 1


_BUILDERS = {Engine.BASELINE: _block_baseline, Engine.ENCDEC: _block_encdec,
             Engine.BLOCKCAUSAL: _block_blockcausal}


def generate_block(session: StreamSession, c=None) -> np.ndarray:
    """Generate, emit and slide in one block; returns ``(N, C, o)``."""
    cfg = session.model.config
    o = cfg.target_frames
    cond = as_condition(c, session.batch)
    stats = StepStats()
    predict = _BUILDERS[session.engine](session, cond, stats)
    x_init = _noise(session, 0, NoiseRole.TARGET_INIT, o)

    def renoise(step):
        return _noise(session, step, NoiseRole.RENOISE, o)

    x0 = np.asarray(sample_block(predict, x_init, session.sampler, renoise, stats),
                    dtype=np.float32)
    if session.engine is Engine.BLOCKCAUSAL:
        _after_blockcausal(session, cond, x0)
    session.steps_run.append(stats.calls)
    _slide(session, x0)
    return x0


def _slide(session: StreamSession, x0: np.ndarray):
    o = x0.shape[2]
    s = session.context.shape[2]
    if s:
        session.context = np.concatenate([session.context, x0], axis=2)[:, :, -s:].copy()
    session.null_frames = np.maximum(session.null_frames - o, 0)
    session.history.append(x0)
    session.block += 1


def stream_blocks(session: StreamSession, B: int, c=None) -> Iterator[np.ndarray]:
    """Pull interface: yields each ``(N, C, o)`` block as soon as it is done."""
    if B < 1:
        raise ContractError(f"number of blocks must be >= 1, got {B}")
    for _ in range(B):
        yield generate_block(session, c)


def _run(session: StreamSession, engine: Engine, B: int, c):
    if session.engine is not engine:
        raise ContractError(f"session engine is {session.engine.value}, not {engine.value}")
    return np.concatenate(list(stream_blocks(session, B, c)), axis=2)


def run_baseline(session: StreamSession, B: int, c=None) -> np.ndarray:
    """Plain block outpainting; returns ``(N, C, B*o)``."""
    return _run(session, Engine.BASELINE, B, c)


def run_encdec(session: StreamSession, B: int, c=None) -> np.ndarray:
    """Context encoded once per block, target decoded ``K`` times against the cache."""
    return _run(session, Engine.ENCDEC, B, c)


def run_blockcausal(session: StreamSession, B: int, c=None) -> np.ndarray:
    """Cache filled once, then one encode of each new block."""
    return _run(session, Engine.BLOCKCAUSAL, B, c)


def run_blockcausal_reference(model: DiT, sampler: SamplerConfig, B: int, c=None,
                              prime=None, batch: int = 1, streams=None) -> np.ndarray:
    """Cache-free block-causal sampling over the whole history.

    Every step reruns the full clean history plus the target block under a
    banded block mask. Matches :func:`run_blockcausal` up to float error.
    """
    cfg = model.config
    s, o = cfg.context_frames, cfg.target_frames
    if sampler.guided:
        raise ConfigError("the reference path supports unguided samplers only")
    ref = StreamSession.create(model, Engine.BLOCKCAUSAL, sampler, batch, prime, streams)
    cond = as_condition(c, batch)
    history = ref.context.copy()
    null0 = ref.null_frames.copy()
    out = []
    for _ in range(B):
        def predict(x, k, step):
            with T.no_record():
                v = model.forward_history(history, x, k, cond, s // o, null0).data
            return v, None

        x_init = _noise(ref, 0, NoiseRole.TARGET_INIT, o)
        x0 = np.asarray(sample_block(predict, x_init, sampler,
                                     lambda step: _noise(ref, step, NoiseRole.RENOISE, o)),
                        dtype=np.float32)
        out.append(x0)
        history = np.concatenate([history, x0], axis=2)
        ref.block += 1
    return np.concatenate(out, axis=2)


# --------------------------------------------------------------------------
# transitions


@dataclass(frozen=True)
class TransitionConfig:
    """Crossfade from global condition ``start`` to ``end``.

    ``schedule`` gives the weight of ``end`` for each block (the last value
    is held if the run is longer). ``dropout_frames`` defaults to the
    180-of-192 fraction of the context.
    """

    start: tuple
    end: tuple
    schedule: tuple
    dropout_frames: int | None = None

    def __post_init__(self):
        sched = tuple(float(w) for w in self.schedule)
        if not sched:
            raise ConfigError("transition schedule is empty")
        if any(not 0.0 <= w <= 1.0 for w in sched):
            raise ConfigError(f"transition weights must lie in [0, 1]: {sched}")
        object.__setattr__(self, "schedule", sched)
        object.__setattr__(self, "start", tuple(np.asarray(self.start, float).ravel()))
        object.__setattr__(self, "end", tuple(np.asarray(self.end, float).ravel()))
        if len(self.start) != len(self.end):
            raise ConfigError("start and end conditions differ in width")

    @staticmethod
    def scaled_dropout(context_frames: int) -> int:
        """Dropout length keeping the 180/192 fraction, rounded half up."""
        return int(math.floor(180 * context_frames / 192 + 0.5))

    def weight(self, block: int) -> float:
        return self.schedule[min(block, len(self.schedule) - 1)]

    @classmethod
    def linear(cls, start, end, blocks: int, fade_start: int, fade_blocks: int, **kw):
        """Hold ``start``, ramp linearly over ``fade_blocks``, then hold ``end``."""
        w = [min(max((b - fade_start + 1) / (fade_blocks + 1), 0.0), 1.0) if fade_blocks
             else float(b >= fade_start) for b in range(blocks)]
        return cls(start, end, tuple(w), **kw)


def run_transition(session: StreamSession, cfg: TransitionConfig, B: int) -> np.ndarray:
    """Crossfaded generation with a single context dropout at the dominance crossing."""
    if session.engine is not Engine.ENCDEC:
        raise ContractError("transitions run on the encoder-decoder engine")
    if session.sampler.kind is not SamplerKind.P4:
        raise ContractError("transitions use the guided ping-pong sampler")
    if B < 1:
        raise ContractError(f"number of blocks must be >= 1, got {B}")
    d = cfg.dropout_frames
    if d is None:
        d = cfg.scaled_dropout(session.model.config.context_frames)
    a = np.asarray(cfg.start, np.float32)
    b = np.asarray(cfg.end, np.float32)
    crossed = False
    out = []
    for i in range(B):
        w = cfg.weight(i)
        if not crossed and w > 0.5:
            session.context_dropout(d)
            crossed = True
        g = ((1.0 - w) * a + w * b).astype(np.float32)
        out.append(generate_block(session, g))
    return np.concatenate(out, axis=2)


# --------------------------------------------------------------------------
# accounting


def predicted_nfe(engine, blocks: int, steps_total: int, s: int, o: int) -> NFECounters:
    """Closed-form pass counts for ``blocks`` blocks with ``steps_total`` sampling steps."""
    engine = Engine(engine)
    if engine is Engine.BASELINE:
        return NFECounters(full_passes=steps_total)
    if engine is Engine.ENCDEC:
        return NFECounters(encode_passes=blocks, decode_passes=steps_total)
    prefill = s // o if blocks else 0
    return NFECounters(encode_passes=prefill + blocks, decode_passes=steps_total)


@dataclass(frozen=True)
class NFEReport:
    engine: str
    blocks: int
    steps: tuple
    measured: dict
    predicted: dict

    def as_dict(self) -> dict:
        return {"engine": self.engine, "blocks": self.blocks, "steps": list(self.steps),
                "measured": self.measured, "predicted": self.predicted}


def report_nfe(session: StreamSession) -> NFEReport:
    """Counters plus closed-form predictions; raises if they disagree."""
    cfg = session.model.config
    pred = predicted_nfe(session.engine, len(session.steps_run), sum(session.steps_run),
                         cfg.context_frames, cfg.target_frames)
    rep = NFEReport(session.engine.value, len(session.steps_run), tuple(session.steps_run),
                    session.counters.as_dict(), pred.as_dict())
    if rep.measured != rep.predicted:
        raise ContractError(f"pass counters {rep.measured} differ from closed form {rep.predicted}")
    return rep
